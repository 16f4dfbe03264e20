//! Command-line front end: run simulations, generate microtraces, validate
//! simulated cycle counts against reference hardware measurements, and
//! check machine configs.
//!
//! Exit codes: 0 on success, 1 when `check-config` finds violations, 2 on
//! input or usage errors.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use microsim_core::config::{parse_config, validate_config, MachineConfig};
use microsim_core::engine::{collect_report, simulate, ReportFormat, SimReport};
use microsim_core::report::{parse_rows_csv, parse_rows_jsonl, total_cycles_of_rows};
use microsim_core::trace::{gen_ops, read_trace_stream, GenParams, TracePattern, TraceStream};
use microsim_core::validate::{compare_cycle_counts, parse_reference_csv, ValidateError};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "microsim",
    about = "Trace-driven, cycle-level multicore out-of-order CPU simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one benchmark: trace file i runs on core i.
    Run {
        /// Machine config file; keys overlay the built-in defaults.
        config: PathBuf,
        /// One trace file per thread.
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Report format: text, csv, or jsonl.
        #[arg(long, default_value = "text")]
        report: String,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare simulated cycle counts against reference measurements.
    Validate {
        /// Directory of per-benchmark reports (`<name>.csv` / `<name>.jsonl`),
        /// or of traces (`<name>.t<k>.trace`) when --config is given.
        #[arg(long)]
        sim: PathBuf,
        /// Reference CSV: `benchmark,machine_label,run_cycles` with
        /// `;`-separated per-run cycle counts.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Simulate traces found in --sim with this machine config
        /// (parallelism capped by MICROSIM_JOBS).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base path for outputs: writes <out>.txt, <out>.csv, <out>.dat.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic microtrace.
    Gen {
        /// ALU_INDEP, DIV_CHAIN, LOAD_CHAIN, STREAM_LOADS, BRANCH_PERIODIC,
        /// or MESI_PINGPONG.
        pattern: String,
        /// Number of ops (per thread).
        n: u64,
        /// Output path; multi-thread patterns write <out>.t<k>.trace.
        #[arg(long)]
        out: PathBuf,
        /// Taken-pattern period for BRANCH_PERIODIC.
        #[arg(long)]
        period: Option<u64>,
        /// Keep LOAD_CHAIN inside one cache block.
        #[arg(long)]
        resident: bool,
        /// Address stride in bytes for load patterns.
        #[arg(long)]
        stride: Option<u64>,
        /// First data address.
        #[arg(long)]
        base_addr: Option<u64>,
        /// First instruction address.
        #[arg(long)]
        base_pc: Option<u64>,
    },
    /// Parse a config and report structural violations.
    CheckConfig {
        config: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    };
    std::process::exit(code);
}

fn load_config(path: &Path) -> Result<MachineConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg = parse_config(&text).with_context(|| format!("parsing {}", path.display()))?;
    let violations = validate_config(&cfg);
    if !violations.is_empty() {
        let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        bail!("config {} is invalid:\n  {}", path.display(), lines.join("\n  "));
    }
    Ok(cfg)
}

fn open_trace(path: &Path, thread_id: usize) -> Result<TraceStream> {
    let file = fs::File::open(path).with_context(|| format!("opening trace {}", path.display()))?;
    Ok(read_trace_stream(file, thread_id))
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run { config, traces, report, out } => {
            let cfg = load_config(&config)?;
            let format: ReportFormat = report.parse().map_err(|e: String| anyhow!(e))?;
            let streams = traces
                .iter()
                .enumerate()
                .map(|(i, p)| open_trace(p, i))
                .collect::<Result<Vec<_>>>()?;
            let sim = simulate(&cfg, streams)?;
            write_or_print(&out, &collect_report(&sim, format))?;
            Ok(0)
        }
        Command::Validate { sim, reference, config, out } => {
            let refs_text = fs::read_to_string(&reference)
                .with_context(|| format!("reading {}", reference.display()))?;
            let refs = parse_reference_csv(&refs_text)?;
            let sims = collect_sim_cycles(&sim, config.as_deref())?;
            let report = match compare_cycle_counts(&sims, &refs) {
                Ok(r) => r,
                Err(e @ ValidateError::NoOverlap) => return Err(e.into()),
                Err(e) => return Err(e.into()),
            };
            match &out {
                Some(base) => {
                    fs::write(base.with_extension("txt"), report.to_text())?;
                    fs::write(base.with_extension("csv"), report.to_csv())?;
                    fs::write(base.with_extension("dat"), report.to_gnuplot_dat())?;
                    println!("mean absolute error: {:.2}%", report.mean_abs_error_pct);
                }
                None => print!("{}", report.to_text()),
            }
            Ok(0)
        }
        Command::Gen { pattern, n, out, period, resident, stride, base_addr, base_pc } => {
            let pattern: TracePattern = pattern.parse()?;
            let defaults = GenParams::default();
            let params = GenParams {
                period: period.unwrap_or(defaults.period),
                resident,
                stride: stride.unwrap_or(defaults.stride),
                base_addr: base_addr.unwrap_or(defaults.base_addr),
                base_pc: base_pc.unwrap_or(defaults.base_pc),
            };
            let threads = gen_ops(pattern, n, &params)?;
            let multi = threads.len() > 1;
            for (t, ops) in threads.iter().enumerate() {
                let path = if multi { thread_path(&out, t) } else { out.clone() };
                let mut text = format!("# {} n={n}\n", pattern.name());
                for op in ops {
                    text.push_str(&microsim_core::trace::format_record(op));
                    text.push('\n');
                }
                fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
                println!("wrote {} ({} ops)", path.display(), ops.len());
            }
            Ok(0)
        }
        Command::CheckConfig { config } => {
            let text = fs::read_to_string(&config)
                .with_context(|| format!("reading config {}", config.display()))?;
            let cfg = parse_config(&text)?;
            let violations = validate_config(&cfg);
            if violations.is_empty() {
                println!("ok");
                Ok(0)
            } else {
                for v in &violations {
                    println!("{v}");
                }
                Ok(1)
            }
        }
    }
}

/// Names a per-thread trace file: `<base>.t<k>.trace`.
fn thread_path(base: &Path, thread: usize) -> PathBuf {
    let stem = base
        .to_string_lossy()
        .strip_suffix(".trace")
        .map(str::to_string)
        .unwrap_or_else(|| base.to_string_lossy().into_owned());
    PathBuf::from(format!("{stem}.t{thread}.trace"))
}

/// Gathers benchmark -> total cycles from a directory of reports, or by
/// simulating the traces found there when a config is supplied.
fn collect_sim_cycles(dir: &Path, config: Option<&Path>) -> Result<BTreeMap<String, u64>> {
    let mut reports: BTreeMap<String, u64> = BTreeMap::new();
    let mut trace_sets: BTreeMap<String, Vec<(usize, PathBuf)>> = BTreeMap::new();

    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if let Some((bench, thread)) = parse_trace_name(&name) {
            trace_sets.entry(bench).or_default().push((thread, path.clone()));
            continue;
        }
        let stem = |suffix: &str| {
            name.strip_suffix(suffix)
                .map(|s| s.strip_suffix(".report").unwrap_or(s).to_string())
        };
        if let Some(bench) = stem(".csv") {
            let rows = parse_rows_csv(&fs::read_to_string(&path)?)?;
            let cycles = total_cycles_of_rows(&rows)
                .ok_or_else(|| anyhow!("{}: no total_cycles row", path.display()))?;
            reports.insert(bench, cycles);
        } else if let Some(bench) = stem(".jsonl") {
            let rows = parse_rows_jsonl(&fs::read_to_string(&path)?)?;
            let cycles = total_cycles_of_rows(&rows)
                .ok_or_else(|| anyhow!("{}: no total_cycles row", path.display()))?;
            reports.insert(bench, cycles);
        }
    }

    if let Some(cfg_path) = config {
        let cfg = load_config(cfg_path)?;
        let simulated = simulate_benchmarks(&cfg, trace_sets)?;
        reports.extend(simulated);
    } else if !trace_sets.is_empty() && reports.is_empty() {
        bail!("{} contains traces but no reports; pass --config to simulate them", dir.display());
    }

    if reports.is_empty() {
        bail!("no simulation results found in {}", dir.display());
    }
    Ok(reports)
}

fn parse_trace_name(name: &str) -> Option<(String, usize)> {
    let rest = name.strip_suffix(".trace")?;
    let (bench, tid) = rest.rsplit_once(".t")?;
    let thread = tid.parse::<usize>().ok()?;
    Some((bench.to_string(), thread))
}

/// Runs one simulation per benchmark, at most MICROSIM_JOBS at a time
/// (default: the host's available parallelism). Simulations share nothing
/// mutable, so results are independent of the parallelism.
fn simulate_benchmarks(
    cfg: &MachineConfig,
    trace_sets: BTreeMap<String, Vec<(usize, PathBuf)>>,
) -> Result<BTreeMap<String, u64>> {
    let jobs = std::env::var("MICROSIM_JOBS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&j| j >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |p| p.get()));

    let work: Vec<(String, Vec<(usize, PathBuf)>)> = trace_sets.into_iter().collect();
    let queue = std::sync::Mutex::new(work);
    let results = std::sync::Mutex::new(BTreeMap::new());
    let failures = std::sync::Mutex::new(Vec::<String>::new());

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let Some((bench, mut files)) = queue.lock().unwrap().pop() else {
                    break;
                };
                files.sort();
                let outcome = (|| -> Result<SimReport> {
                    let streams = files
                        .iter()
                        .enumerate()
                        .map(|(i, (_tid, p))| open_trace(p, i))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(simulate(cfg, streams)?)
                })();
                match outcome {
                    Ok(report) => {
                        results.lock().unwrap().insert(bench, report.total_cycles);
                    }
                    Err(e) => failures.lock().unwrap().push(format!("{bench}: {e:#}")),
                }
            });
        }
    });

    let failures = failures.into_inner().unwrap();
    if !failures.is_empty() {
        bail!("simulation failures:\n  {}", failures.join("\n  "));
    }
    Ok(results.into_inner().unwrap())
}

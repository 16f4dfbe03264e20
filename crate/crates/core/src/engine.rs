//! Assembles cores, predictors, the cache hierarchy and the bus into one
//! deterministic cycle-stepped simulation.
//!
//! Each global cycle steps the bus and hierarchy bookkeeping first, then
//! every core in core-id order; that fixed order is the sole tie-break and
//! the source of bit-determinism. Trace thread i drives core i. Long-
//! latency waits are tracked as completion timestamps, so idle units cost
//! nothing per cycle.

use crate::config::{validate_config, MachineConfig};
use crate::interconnect::BusStats;
use crate::memhier::{CacheStats, MemHierarchy, TlbStats};
use crate::pipeline::{Core, CoreStats, PredictorMode};
use crate::trace::{TraceError, TraceStream};
use thiserror::Error;

pub use crate::report::{collect_report, ReportFormat};

/// Abort threshold for runaway simulations.
pub const DEFAULT_CYCLE_CEILING: u64 = 10_000_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("thread {thread}: {source}")]
    Trace {
        thread: usize,
        #[source]
        source: TraceError,
    },
    #[error("simulation exceeded {ceiling} cycles without retiring every op")]
    Divergence { ceiling: u64 },
    #[error("invalid machine config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

/// Knobs for [`simulate_with_options`].
#[derive(Clone, Copy, Debug)]
pub struct SimOptions {
    pub cycle_ceiling: u64,
    pub predictor: PredictorMode,
    /// Check resource caps and coherence invariants every cycle (used by
    /// the fuzz suites; slows simulation down).
    pub check_invariants: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            cycle_ceiling: DEFAULT_CYCLE_CEILING,
            predictor: PredictorMode::Tage,
            check_invariants: false,
        }
    }
}

/// Cache statistics for one core's private levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CoreCacheStats {
    pub l1i: CacheStats,
    pub l1d: CacheStats,
    pub l2: CacheStats,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CoreTlbStats {
    pub itlb: TlbStats,
    pub dtlb: TlbStats,
}

/// Everything a simulation produced. All fields except `wall_seconds` are
/// bit-deterministic for fixed inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SimReport {
    /// Maximum over cores of the per-core cycle counts.
    pub total_cycles: u64,
    pub frequency_hz: u64,
    pub cores: Vec<CoreStats>,
    pub core_caches: Vec<CoreCacheStats>,
    pub core_tlbs: Vec<CoreTlbStats>,
    pub l3: CacheStats,
    pub bus: BusStats,
    /// Host seconds spent simulating; excluded from determinism
    /// comparisons.
    pub wall_seconds: f64,
    /// total_cycles / frequency.
    pub simulated_seconds: f64,
}

impl SimReport {
    /// Copy with the wall clock zeroed, for determinism comparisons.
    pub fn without_wall_clock(&self) -> SimReport {
        SimReport {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Runs a full simulation with default options.
pub fn simulate(cfg: &MachineConfig, traces: Vec<TraceStream>) -> Result<SimReport, SimError> {
    simulate_with_options(cfg, traces, &SimOptions::default())
}

/// Runs a full simulation: one core per trace (trace i on core i), stepped
/// cycle by cycle until every trace has fully retired and bus traffic has
/// drained.
pub fn simulate_with_options(
    cfg: &MachineConfig,
    traces: Vec<TraceStream>,
    opts: &SimOptions,
) -> Result<SimReport, SimError> {
    let violations = validate_config(cfg);
    if let Some(first) = violations.first() {
        return Err(SimError::InvalidConfig(format!(
            "{first}{}",
            if violations.len() > 1 {
                format!(" (and {} more)", violations.len() - 1)
            } else {
                String::new()
            }
        )));
    }
    if traces.len() as u64 > cfg.num_cores {
        return Err(SimError::Unsupported(format!(
            "{} traces exceed the configured {} cores",
            traces.len(),
            cfg.num_cores
        )));
    }

    let started = std::time::Instant::now();
    let active = traces.len();
    if active == 0 {
        return Ok(SimReport {
            total_cycles: 0,
            frequency_hz: cfg.frequency_hz,
            cores: Vec::new(),
            core_caches: Vec::new(),
            core_tlbs: Vec::new(),
            l3: CacheStats::default(),
            bus: BusStats::default(),
            wall_seconds: started.elapsed().as_secs_f64(),
            simulated_seconds: 0.0,
        });
    }

    let mut hier = MemHierarchy::new(cfg, active).map_err(SimError::Unsupported)?;
    let mut cores = Vec::with_capacity(active);
    for (i, trace) in traces.into_iter().enumerate() {
        cores.push(Core::new(cfg, trace, i, opts.predictor)?);
    }

    let mut cycle: u64 = 0;
    loop {
        let all_done = cores.iter().all(Core::done);
        if all_done && !hier.traffic_pending() {
            break;
        }
        hier.step(cycle);
        for core in &mut cores {
            let ev = core.step(&mut hier, cycle);
            if let Some(e) = core.take_error() {
                return Err(SimError::Trace {
                    thread: core.id(),
                    source: e,
                });
            }
            if opts.check_invariants {
                core.check_caps(&ev).map_err(SimError::InvariantViolation)?;
            }
        }
        if opts.check_invariants {
            hier.check_touched().map_err(SimError::InvariantViolation)?;
            if cycle.is_multiple_of(1024) {
                hier.check_full().map_err(SimError::InvariantViolation)?;
            }
        }
        cycle += 1;
        if cycle > opts.cycle_ceiling {
            return Err(SimError::Divergence {
                ceiling: opts.cycle_ceiling,
            });
        }
    }
    if opts.check_invariants {
        hier.check_full().map_err(SimError::InvariantViolation)?;
    }

    let core_stats: Vec<CoreStats> = cores.iter().map(|c| c.stats()).collect();
    let total_cycles = core_stats.iter().map(|s| s.cycles).max().unwrap_or(0);
    let report = SimReport {
        total_cycles,
        frequency_hz: cfg.frequency_hz,
        core_caches: (0..active)
            .map(|c| {
                let (l1i, l1d, l2) = hier.core_cache_stats(c);
                CoreCacheStats { l1i, l1d, l2 }
            })
            .collect(),
        core_tlbs: (0..active)
            .map(|c| {
                let (itlb, dtlb) = hier.tlb_stats(c);
                CoreTlbStats { itlb, dtlb }
            })
            .collect(),
        cores: core_stats,
        l3: hier.l3_stats(),
        bus: hier.bus_stats(),
        wall_seconds: started.elapsed().as_secs_f64(),
        simulated_seconds: total_cycles as f64 / cfg.frequency_hz as f64,
    };
    Ok(report)
}

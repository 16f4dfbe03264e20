//! Report rendering: a [`SimReport`] flattens losslessly into metric rows
//! that can be emitted as human-readable text, CSV, or JSON lines, and
//! parsed back exactly.
//!
//! CSV columns are `scope,core,metric,value` with one row per (core,
//! metric) plus machine-level rows, in a stable order. JSON lines carry one
//! object per metric with keys `{scope, core, metric, value}`.

use crate::engine::SimReport;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    JsonLines,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" | "json-lines" => Ok(ReportFormat::JsonLines),
            _ => Err(format!("unknown report format `{s}` (text, csv, jsonl)")),
        }
    }
}

/// A metric value; counters are integers, times are floats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Int(u64),
    Float(f64),
}

impl std::fmt::Display for MetricValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricValue::Int(v) => write!(f, "{v}"),
            MetricValue::Float(v) => write!(f, "{v}"),
        }
    }
}

/// One rendered metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scope: String,
    pub core: Option<u64>,
    pub metric: String,
    pub value: MetricValue,
}

#[derive(Debug, Error)]
pub enum ReportParseError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

fn machine_row(metric: &str, value: MetricValue) -> ReportRow {
    ReportRow {
        scope: "machine".into(),
        core: None,
        metric: metric.into(),
        value,
    }
}

fn core_row(core: u64, metric: &str, value: u64) -> ReportRow {
    ReportRow {
        scope: "core".into(),
        core: Some(core),
        metric: metric.into(),
        value: MetricValue::Int(value),
    }
}

/// Flattens a report into rows; the inverse of nothing, but parseable back
/// row-for-row by [`parse_rows_csv`] / [`parse_rows_jsonl`].
pub fn report_rows(r: &SimReport) -> Vec<ReportRow> {
    let mut rows = vec![
        machine_row("total_cycles", MetricValue::Int(r.total_cycles)),
        machine_row("frequency_hz", MetricValue::Int(r.frequency_hz)),
        machine_row("num_cores", MetricValue::Int(r.cores.len() as u64)),
        machine_row("simulated_seconds", MetricValue::Float(r.simulated_seconds)),
        machine_row("wall_clock_seconds", MetricValue::Float(r.wall_seconds)),
    ];
    for (name, s) in [("l3", &r.l3)] {
        for (metric, v) in [
            ("accesses", s.accesses),
            ("hits", s.hits),
            ("misses", s.misses),
            ("writebacks", s.writebacks),
            ("invalidations", s.invalidations),
        ] {
            rows.push(machine_row(&format!("{name}.{metric}"), MetricValue::Int(v)));
        }
    }
    for (metric, v) in [
        ("messages", r.bus.messages),
        ("flits", r.bus.flits),
        ("max_queue_depth", r.bus.max_queue_depth),
    ] {
        rows.push(machine_row(&format!("bus.{metric}"), MetricValue::Int(v)));
    }

    for (i, stats) in r.cores.iter().enumerate() {
        let c = i as u64;
        rows.push(core_row(c, "cycles", stats.cycles));
        rows.push(core_row(c, "retired", stats.retired));
        rows.push(core_row(c, "predictions", stats.predictions));
        rows.push(core_row(c, "mispredictions", stats.mispredictions));
        for kind in crate::config::FuKind::ALL {
            rows.push(core_row(
                c,
                &format!("fu_issues.{}", kind.name()),
                stats.fu_issues[kind.index()],
            ));
        }
        rows.push(core_row(c, "loads_issued", stats.loads_issued));
        rows.push(core_row(c, "stores_issued", stats.stores_issued));
        rows.push(core_row(c, "store_forwards", stats.store_forwards));
        for (metric, v) in [
            ("stalls.rob_full", stats.stalls.rob_full),
            ("stalls.iw_full", stats.stalls.iw_full),
            ("stalls.lq_full", stats.stalls.lq_full),
            ("stalls.sq_full", stats.stalls.sq_full),
            ("stalls.no_phys_reg", stats.stalls.no_phys_reg),
            ("stalls.no_fu", stats.stalls.no_fu),
        ] {
            rows.push(core_row(c, metric, v));
        }
        if let Some(caches) = r.core_caches.get(i) {
            for (name, s) in [("l1i", &caches.l1i), ("l1d", &caches.l1d), ("l2", &caches.l2)] {
                for (metric, v) in [
                    ("accesses", s.accesses),
                    ("hits", s.hits),
                    ("misses", s.misses),
                    ("writebacks", s.writebacks),
                    ("invalidations", s.invalidations),
                ] {
                    rows.push(core_row(c, &format!("{name}.{metric}"), v));
                }
            }
        }
        if let Some(tlbs) = r.core_tlbs.get(i) {
            for (name, s) in [("itlb", &tlbs.itlb), ("dtlb", &tlbs.dtlb)] {
                rows.push(core_row(c, &format!("{name}.hits"), s.hits));
                rows.push(core_row(c, &format!("{name}.misses"), s.misses));
            }
        }
    }
    rows
}

/// Renders a report in the requested format. Every numeric field of the
/// report appears exactly once.
pub fn collect_report(r: &SimReport, format: ReportFormat) -> String {
    let rows = report_rows(r);
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("scope,core,metric,value\n");
            for row in &rows {
                let core = row.core.map_or(String::new(), |c| c.to_string());
                out.push_str(&format!("{},{},{},{}\n", row.scope, core, row.metric, row.value));
            }
            out
        }
        ReportFormat::JsonLines => {
            let mut out = String::new();
            for row in &rows {
                out.push_str(&serde_json::to_string(row).expect("rows serialize"));
                out.push('\n');
            }
            out
        }
        ReportFormat::Text => {
            let mut out = String::new();
            out.push_str("== machine ==\n");
            for row in rows.iter().filter(|r| r.core.is_none()) {
                out.push_str(&format!("{:<24} {}\n", row.metric, row.value));
            }
            let cores: Vec<u64> = {
                let mut v: Vec<u64> = rows.iter().filter_map(|r| r.core).collect();
                v.dedup();
                v
            };
            for c in cores {
                out.push_str(&format!("\n== core {c} ==\n"));
                for row in rows.iter().filter(|r| r.core == Some(c)) {
                    out.push_str(&format!("{:<24} {}\n", row.metric, row.value));
                }
            }
            out
        }
    }
}

fn parse_value(s: &str) -> Option<MetricValue> {
    if let Ok(v) = s.parse::<u64>() {
        return Some(MetricValue::Int(v));
    }
    s.parse::<f64>().ok().map(MetricValue::Float)
}

/// Parses a CSV report back into rows.
pub fn parse_rows_csv(text: &str) -> Result<Vec<ReportRow>, ReportParseError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(4, ',').collect();
        let err = |msg: &str| ReportParseError::Malformed {
            line: idx + 1,
            msg: msg.to_string(),
        };
        if parts.len() != 4 {
            return Err(err("expected 4 columns"));
        }
        let core = if parts[1].is_empty() {
            None
        } else {
            Some(parts[1].parse::<u64>().map_err(|_| err("bad core id"))?)
        };
        rows.push(ReportRow {
            scope: parts[0].to_string(),
            core,
            metric: parts[2].to_string(),
            value: parse_value(parts[3]).ok_or_else(|| err("bad value"))?,
        });
    }
    Ok(rows)
}

/// Parses a JSON-lines report back into rows.
pub fn parse_rows_jsonl(text: &str) -> Result<Vec<ReportRow>, ReportParseError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ReportRow = serde_json::from_str(line).map_err(|e| ReportParseError::Malformed {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Pulls the machine-level total cycle count out of parsed rows.
pub fn total_cycles_of_rows(rows: &[ReportRow]) -> Option<u64> {
    rows.iter().find_map(|r| {
        if r.scope == "machine" && r.metric == "total_cycles" {
            match r.value {
                MetricValue::Int(v) => Some(v),
                MetricValue::Float(v) => Some(v as u64),
            }
        } else {
            None
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_sandybridge;
    use crate::engine::simulate;
    use crate::trace::{gen_ops, GenParams, TracePattern, TraceStream};

    fn sample_report() -> SimReport {
        let cfg = default_sandybridge();
        let ops = gen_ops(TracePattern::MesiPingpong, 20, &GenParams::default()).unwrap();
        let traces = ops
            .into_iter()
            .enumerate()
            .map(|(t, o)| TraceStream::from_ops(o, t))
            .collect();
        simulate(&cfg, traces).unwrap()
    }

    #[test]
    fn empty_report_renders_header_and_zeros() {
        let cfg = default_sandybridge();
        let report = simulate(&cfg, vec![]).unwrap();
        let text = collect_report(&report, ReportFormat::Text);
        assert!(text.contains("== machine =="));
        assert!(text.contains("total_cycles"));
        let csv = collect_report(&report, ReportFormat::Csv);
        assert!(csv.contains("machine,,total_cycles,0"));
    }

    #[test]
    fn csv_round_trips_every_field() {
        let report = sample_report();
        let rows = report_rows(&report);
        let parsed = parse_rows_csv(&collect_report(&report, ReportFormat::Csv)).unwrap();
        assert_eq!(rows, parsed);
    }

    #[test]
    fn jsonl_round_trips_every_field() {
        let report = sample_report();
        let rows = report_rows(&report);
        let parsed = parse_rows_jsonl(&collect_report(&report, ReportFormat::JsonLines)).unwrap();
        assert_eq!(rows, parsed);
    }

    #[test]
    fn csv_has_one_section_per_core() {
        let report = sample_report();
        assert_eq!(report.cores.len(), 2);
        let rows = report_rows(&report);
        for c in [0u64, 1] {
            assert!(rows.iter().any(|r| r.core == Some(c) && r.metric == "cycles"));
        }
        assert!(rows.iter().all(|r| r.core.is_none() || r.core < Some(2)));
    }

    #[test]
    fn total_cycles_recoverable() {
        let report = sample_report();
        let rows = parse_rows_csv(&collect_report(&report, ReportFormat::Csv)).unwrap();
        assert_eq!(total_cycles_of_rows(&rows), Some(report.total_cycles));
    }
}

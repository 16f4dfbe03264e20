//! Validation harness: ingests reference hardware measurements, compares
//! them against simulated cycle counts, and reports absolute percentage
//! errors.
//!
//! Reference CSV format: header `benchmark,machine_label,run_cycles`, with
//! `run_cycles` a `;`-separated list of per-run cycle counts so the
//! averaging is reproducible inside the tool. Comparison uses the unsigned
//! absolute error `100 * |simulated - reference| / reference`; a signed
//! error column is additionally emitted in CSV for direction analysis,
//! clearly labeled non-normative. Errors are computed in double precision
//! and rendered to two decimals.

use crate::engine::SimReport;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ValidateError {
    #[error("reference cycle count must be positive")]
    NonPositiveReference,
    #[error("no comparison rows")]
    EmptySet,
    #[error("no benchmark appears in both the simulated and reference sets")]
    NoOverlap,
    #[error("reference csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

/// One benchmark's hardware measurement: raw per-run cycle counts plus a
/// label describing the machine they came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferenceMeasurement {
    pub benchmark: String,
    pub machine_label: String,
    pub runs: Vec<u64>,
}

impl ReferenceMeasurement {
    /// Arithmetic mean of the runs.
    pub fn mean_cycles(&self) -> f64 {
        self.runs.iter().sum::<u64>() as f64 / self.runs.len() as f64
    }
}

/// One matched benchmark in a validation report.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub benchmark: String,
    pub simulated_cycles: f64,
    pub reference_cycles: f64,
    pub abs_error_pct: f64,
}

impl ComparisonRow {
    /// Signed error (positive = over-prediction); non-normative.
    pub fn signed_error_pct(&self) -> f64 {
        100.0 * (self.simulated_cycles - self.reference_cycles) / self.reference_cycles
    }
}

/// Error-band counters: `<10%`, `[10%, 20%)`, `[20%, 30%)`, `>=30%`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorBands {
    pub below_10: u64,
    pub from_10_to_20: u64,
    pub from_20_to_30: u64,
    pub above_30: u64,
}

impl ErrorBands {
    fn add(&mut self, err: f64) {
        if err < 10.0 {
            self.below_10 += 1;
        } else if err < 20.0 {
            self.from_10_to_20 += 1;
        } else if err < 30.0 {
            self.from_20_to_30 += 1;
        } else {
            self.above_30 += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.below_10 + self.from_10_to_20 + self.from_20_to_30 + self.above_30
    }
}

/// Suite-level comparison: per-benchmark rows, the mean error, band
/// histogram, and the benchmarks present on only one side (never silently
/// dropped).
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub rows: Vec<ComparisonRow>,
    pub mean_abs_error_pct: f64,
    pub bands: ErrorBands,
    /// Reference benchmarks with no simulation result.
    pub missing_in_sim: Vec<String>,
    /// Simulated benchmarks with no reference measurement.
    pub missing_in_ref: Vec<String>,
}

/// `100 * |simulated - reference| / reference`.
pub fn absolute_error(simulated: f64, reference: f64) -> Result<f64, ValidateError> {
    if reference <= 0.0 {
        return Err(ValidateError::NonPositiveReference);
    }
    Ok(100.0 * (simulated - reference).abs() / reference)
}

/// Arithmetic mean of the rows' absolute errors.
pub fn mean_absolute_error(rows: &[ComparisonRow]) -> Result<f64, ValidateError> {
    if rows.is_empty() {
        return Err(ValidateError::EmptySet);
    }
    Ok(rows.iter().map(|r| r.abs_error_pct).sum::<f64>() / rows.len() as f64)
}

/// Compares simulated total cycle counts against reference means. Rows are
/// ordered by benchmark name.
pub fn compare_cycle_counts(
    sims: &BTreeMap<String, u64>,
    refs: &[ReferenceMeasurement],
) -> Result<ValidationReport, ValidateError> {
    let mut rows = Vec::new();
    let mut bands = ErrorBands::default();
    let mut missing_in_sim = Vec::new();
    let mut matched: Vec<&str> = Vec::new();

    let mut sorted_refs: Vec<&ReferenceMeasurement> = refs.iter().collect();
    sorted_refs.sort_by(|a, b| a.benchmark.cmp(&b.benchmark));
    for r in sorted_refs {
        match sims.get(&r.benchmark) {
            None => missing_in_sim.push(r.benchmark.clone()),
            Some(&cycles) => {
                let reference = r.mean_cycles();
                let err = absolute_error(cycles as f64, reference)?;
                bands.add(err);
                matched.push(&r.benchmark);
                rows.push(ComparisonRow {
                    benchmark: r.benchmark.clone(),
                    simulated_cycles: cycles as f64,
                    reference_cycles: reference,
                    abs_error_pct: err,
                });
            }
        }
    }
    let missing_in_ref: Vec<String> = sims
        .keys()
        .filter(|b| !matched.contains(&b.as_str()))
        .cloned()
        .collect();
    if rows.is_empty() {
        return Err(ValidateError::NoOverlap);
    }
    let mean = mean_absolute_error(&rows)?;
    Ok(ValidationReport {
        rows,
        mean_abs_error_pct: mean,
        bands,
        missing_in_sim,
        missing_in_ref,
    })
}

/// Compares full simulation reports (their `total_cycles`) against
/// reference measurements.
pub fn compare_report(
    sims: &BTreeMap<String, SimReport>,
    refs: &[ReferenceMeasurement],
) -> Result<ValidationReport, ValidateError> {
    let cycles: BTreeMap<String, u64> = sims
        .iter()
        .map(|(b, r)| (b.clone(), r.total_cycles))
        .collect();
    compare_cycle_counts(&cycles, refs)
}

/// Parses the reference measurement CSV.
pub fn parse_reference_csv(text: &str) -> Result<Vec<ReferenceMeasurement>, ValidateError> {
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate();
    let err = |line: usize, msg: &str| ValidateError::Csv {
        line: line + 1,
        msg: msg.to_string(),
    };
    match lines.next() {
        Some((_, header)) if header.trim() == "benchmark,machine_label,run_cycles" => {}
        Some((i, _)) => return Err(err(i, "expected header `benchmark,machine_label,run_cycles`")),
        None => return Err(err(0, "empty file")),
    }
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, ',').collect();
        if parts.len() != 3 {
            return Err(err(i, "expected 3 columns"));
        }
        let benchmark = parts[0].trim().to_string();
        if benchmark.is_empty() {
            return Err(err(i, "empty benchmark name"));
        }
        let mut runs = Vec::new();
        for piece in parts[2].split(';') {
            let v = piece
                .trim()
                .parse::<u64>()
                .map_err(|_| err(i, "run_cycles must be `;`-separated positive integers"))?;
            if v == 0 {
                return Err(err(i, "run cycle counts must be > 0"));
            }
            runs.push(v);
        }
        if runs.is_empty() {
            return Err(err(i, "at least one run required"));
        }
        out.push(ReferenceMeasurement {
            benchmark,
            machine_label: parts[1].trim().to_string(),
            runs,
        });
    }
    Ok(out)
}

impl ValidationReport {
    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<20} {:>16} {:>16} {:>12}\n",
            "benchmark", "simulated", "reference", "abs_error_%"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<20} {:>16} {:>16.2} {:>12.2}\n",
                row.benchmark, row.simulated_cycles, row.reference_cycles, row.abs_error_pct
            ));
        }
        out.push_str(&format!(
            "\nmean absolute error: {:.2}%  ({} benchmarks)\n",
            self.mean_abs_error_pct,
            self.rows.len()
        ));
        out.push_str(&format!(
            "error bands: <10%: {}   10-20%: {}   20-30%: {}   >30%: {}\n",
            self.bands.below_10, self.bands.from_10_to_20, self.bands.from_20_to_30, self.bands.above_30
        ));
        if !self.missing_in_sim.is_empty() {
            out.push_str(&format!("missing simulation results: {}\n", self.missing_in_sim.join(", ")));
        }
        if !self.missing_in_ref.is_empty() {
            out.push_str(&format!("missing reference measurements: {}\n", self.missing_in_ref.join(", ")));
        }
        out
    }

    /// CSV rows; `signed_error_pct` is informational only.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("benchmark,simulated,reference,abs_error_pct,signed_error_pct\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.2},{:.2}\n",
                row.benchmark,
                row.simulated_cycles,
                row.reference_cycles,
                row.abs_error_pct,
                row.signed_error_pct()
            ));
        }
        out
    }

    /// Gnuplot-compatible data file for bar charts
    /// (`plot 'file' using 4:xtic(1)`).
    pub fn to_gnuplot_dat(&self) -> String {
        let mut out = String::from("# benchmark simulated reference abs_error_pct\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{} {} {} {:.2}\n",
                row.benchmark, row.simulated_cycles, row.reference_cycles, row.abs_error_pct
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(err: f64) -> ComparisonRow {
        ComparisonRow {
            benchmark: format!("b{err}"),
            simulated_cycles: 100.0 + err,
            reference_cycles: 100.0,
            abs_error_pct: err,
        }
    }

    #[test]
    fn absolute_error_examples() {
        assert_eq!(absolute_error(238.0, 238.0).unwrap(), 0.0);
        assert!((absolute_error(111.45, 100.0).unwrap() - 11.45).abs() < 1e-12);
        assert!((absolute_error(81.23, 100.0).unwrap() - 18.77).abs() < 1e-12);
    }

    #[test]
    fn absolute_error_rejects_non_positive_reference() {
        assert_eq!(absolute_error(1.0, 0.0), Err(ValidateError::NonPositiveReference));
        assert_eq!(absolute_error(1.0, -5.0), Err(ValidateError::NonPositiveReference));
    }

    #[test]
    fn mean_examples() {
        let rows = vec![row(10.0), row(20.0), row(30.0)];
        assert_eq!(mean_absolute_error(&rows).unwrap(), 20.0);
        assert_eq!(mean_absolute_error(&rows[..1]).unwrap(), 10.0);
        let zeros = vec![row(0.0), row(0.0), row(0.0)];
        assert_eq!(mean_absolute_error(&zeros).unwrap(), 0.0);
        assert_eq!(mean_absolute_error(&[]), Err(ValidateError::EmptySet));
    }

    #[test]
    fn scale_invariance() {
        for k in [0.5, 2.0, 1000.0] {
            let a = absolute_error(123.0, 100.0).unwrap();
            let b = absolute_error(123.0 * k, 100.0 * k).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_iff_equal() {
        assert_eq!(absolute_error(77.0, 77.0).unwrap(), 0.0);
        assert!(absolute_error(77.0001, 77.0).unwrap() > 0.0);
    }

    #[test]
    fn permutation_invariance() {
        let mut rows = vec![row(3.0), row(1.0), row(2.0)];
        let a = mean_absolute_error(&rows).unwrap();
        rows.reverse();
        assert_eq!(a, mean_absolute_error(&rows).unwrap());
    }

    #[test]
    fn exact_match_is_zero_error() {
        let sims = BTreeMap::from([("x".to_string(), 238u64)]);
        let refs = vec![ReferenceMeasurement {
            benchmark: "x".into(),
            machine_label: "ref".into(),
            runs: vec![238],
        }];
        let report = compare_cycle_counts(&sims, &refs).unwrap();
        assert_eq!(report.mean_abs_error_pct, 0.0);
        assert_eq!(report.bands.below_10, 1);
    }

    #[test]
    fn unmatched_benchmarks_are_listed_not_dropped() {
        let sims = BTreeMap::from([("a".to_string(), 100u64), ("c".to_string(), 100u64)]);
        let refs = vec![
            ReferenceMeasurement { benchmark: "a".into(), machine_label: "m".into(), runs: vec![100] },
            ReferenceMeasurement { benchmark: "b".into(), machine_label: "m".into(), runs: vec![100] },
        ];
        let report = compare_cycle_counts(&sims, &refs).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.missing_in_sim, vec!["b".to_string()]);
        assert_eq!(report.missing_in_ref, vec!["c".to_string()]);
    }

    #[test]
    fn disjoint_sets_are_no_overlap() {
        let sims = BTreeMap::from([("a".to_string(), 100u64)]);
        let refs = vec![ReferenceMeasurement {
            benchmark: "b".into(),
            machine_label: "m".into(),
            runs: vec![100],
        }];
        assert_eq!(compare_cycle_counts(&sims, &refs), Err(ValidateError::NoOverlap));
    }

    #[test]
    fn bands_partition_rows() {
        let sims = BTreeMap::from([
            ("a".to_string(), 105u64),
            ("b".to_string(), 110u64),
            ("c".to_string(), 125u64),
            ("d".to_string(), 180u64),
        ]);
        let refs: Vec<ReferenceMeasurement> = ["a", "b", "c", "d"]
            .iter()
            .map(|b| ReferenceMeasurement {
                benchmark: b.to_string(),
                machine_label: "m".into(),
                runs: vec![100],
            })
            .collect();
        let report = compare_cycle_counts(&sims, &refs).unwrap();
        assert_eq!(report.bands.total(), 4);
        assert_eq!(report.bands.below_10, 1);
        assert_eq!(report.bands.from_10_to_20, 1);
        assert_eq!(report.bands.from_20_to_30, 1);
        assert_eq!(report.bands.above_30, 1);
    }

    #[test]
    fn reference_csv_round_trip() {
        let text = "benchmark,machine_label,run_cycles\n\
                    bzip2,poweredge-r620,1000;1010;990\n\
                    mcf,poweredge-r620,5000\n";
        let refs = parse_reference_csv(text).unwrap();
        assert_eq!(refs.len(), 2);
        assert_eq!(refs[0].runs, vec![1000, 1010, 990]);
        assert_eq!(refs[0].mean_cycles(), 1000.0);
        assert_eq!(refs[1].machine_label, "poweredge-r620");
    }

    #[test]
    fn reference_csv_errors_carry_lines() {
        let text = "benchmark,machine_label,run_cycles\nbad-line\n";
        assert_eq!(
            parse_reference_csv(text),
            Err(ValidateError::Csv { line: 2, msg: "expected 3 columns".into() })
        );
        let text = "benchmark,machine_label,run_cycles\nb,m,10;zero\n";
        assert!(matches!(parse_reference_csv(text), Err(ValidateError::Csv { line: 2, .. })));
    }

    #[test]
    fn rendering_contains_all_rows() {
        let sims = BTreeMap::from([("a".to_string(), 112u64)]);
        let refs = vec![ReferenceMeasurement {
            benchmark: "a".into(),
            machine_label: "m".into(),
            runs: vec![100],
        }];
        let report = compare_cycle_counts(&sims, &refs).unwrap();
        assert!(report.to_text().contains("12.00"));
        assert!(report.to_csv().starts_with("benchmark,simulated,reference,abs_error_pct,signed_error_pct"));
        assert!(report.to_gnuplot_dat().lines().count() == 2);
    }
}

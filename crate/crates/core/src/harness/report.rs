//! Dev/test generalization gaps across runs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::train::{read_metrics, MetricsRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunGap {
    pub source: PathBuf,
    /// `(step, test − dev)` for every record with both rates.
    pub trajectory: Vec<(usize, f64)>,
    pub final_dev: f64,
    pub final_test: f64,
    pub final_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub runs: Vec<RunGap>,
    /// `reduction[i][j] = 1 − gap_i / gap_j`: how much smaller run `i`'s final
    /// gap is than run `j`'s. `None` when `gap_j` is zero.
    pub reduction: Vec<Vec<Option<f64>>>,
}

pub fn gap_from_records(source: &Path, records: &[MetricsRecord]) -> Result<RunGap> {
    let trajectory: Vec<(usize, f64)> = records
        .iter()
        .filter(|r| r.dev_error_rate.is_finite() && r.test_error_rate.is_finite())
        .map(|r| (r.step, r.test_error_rate - r.dev_error_rate))
        .collect();
    let last = records
        .iter()
        .rev()
        .find(|r| r.dev_error_rate.is_finite() && r.test_error_rate.is_finite())
        .ok_or_else(|| Error::Format(format!("{} has no record with dev and test rates", source.display())))?;
    Ok(RunGap {
        source: source.to_path_buf(),
        trajectory,
        final_dev: last.dev_error_rate,
        final_test: last.test_error_rate,
        final_gap: last.test_error_rate - last.dev_error_rate,
    })
}

/// `1 − a / b`, the relative reduction of gap `a` against gap `b`.
pub fn reduction_ratio(a: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| 1.0 - a / b)
}

pub fn report_from_gaps(runs: Vec<RunGap>) -> ConvergenceReport {
    let reduction = runs
        .iter()
        .map(|a| runs.iter().map(|b| reduction_ratio(a.final_gap, b.final_gap)).collect())
        .collect();
    ConvergenceReport { runs, reduction }
}

pub fn convergence_report(paths: &[PathBuf]) -> Result<ConvergenceReport> {
    if paths.is_empty() {
        return Err(Error::Contract("need at least one metrics file".into()));
    }
    let runs = paths
        .iter()
        .map(|p| gap_from_records(p, &read_metrics(p)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(report_from_gaps(runs))
}

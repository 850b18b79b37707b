//! CSV tables and run metadata.

use std::io::{self, Write};

use mssrk::engine::StepRecord;
use mssrk::format::sci17;
use mssrk::maxwell3d::relative_drift;
use mssrk::NoisePath;

pub const HEADER_1D: &str = "step,time,ms_residual_max,quadratic_invariant,solver_iterations";
pub const HEADER_MAXWELL: &str = "step,time,energy,energy_rel_drift,ms_residual_max,solver_iterations";

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".to_string(), sci17)
}

/// Step and time of the step that failed, appended as a row of `nan`s with
/// `solver_iterations = -1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FailureRow {
    pub step: usize,
    pub time: f64,
}

pub fn write_1d_csv<W: Write>(mut w: W, records: &[StepRecord<f64>], failure: Option<FailureRow>) -> io::Result<()> {
    writeln!(w, "{HEADER_1D}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.step,
            sci17(r.time),
            opt(r.ms_residual_max),
            sci17(r.invariant),
            r.iterations
        )?;
    }
    if let Some(f) = failure {
        writeln!(w, "{},{},nan,nan,-1", f.step, sci17(f.time))?;
    }
    w.flush()
}

pub fn write_maxwell_csv<W: Write>(mut w: W, records: &[StepRecord<f64>], failure: Option<FailureRow>) -> io::Result<()> {
    writeln!(w, "{HEADER_MAXWELL}")?;
    let e0 = records.first().map_or(0.0, |r| r.invariant);
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.step,
            sci17(r.time),
            sci17(r.invariant),
            sci17(relative_drift(r.invariant, e0)),
            opt(r.ms_residual_max),
            r.iterations
        )?;
    }
    if let Some(f) = failure {
        writeln!(w, "{},{},nan,nan,nan,-1", f.step, sci17(f.time))?;
    }
    w.flush()
}

/// Largest relative deviation of the recorded invariant from its first value.
pub fn max_relative_drift(records: &[StepRecord<f64>]) -> f64 {
    let e0 = records.first().map_or(0.0, |r| r.invariant);
    records.iter().map(|r| relative_drift(r.invariant, e0)).fold(0.0, f64::max)
}

pub fn max_ms_residual(records: &[StepRecord<f64>]) -> Option<f64> {
    records
        .iter()
        .filter_map(|r| r.ms_residual_max)
        .fold(None, |acc, x| Some(acc.map_or(x, |a: f64| a.max(x))))
}

/// Empirical moments of the increments at one evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointStats {
    pub point: Vec<f64>,
    pub variance: f64,
    pub expected_variance: f64,
    /// Standard error of the variance estimate under Gaussian increments.
    pub standard_error: f64,
    /// Lag-one correlation between consecutive increments.
    pub lag1_correlation: f64,
}

impl PointStats {
    pub fn variance_ok(&self) -> bool {
        (self.variance - self.expected_variance).abs() <= 3.0 * self.standard_error
    }

    /// Correlation below three standard errors of a zero correlation.
    pub fn correlation_ok(&self, samples: usize) -> bool {
        self.lag1_correlation.abs() < 3.0 / (samples as f64).sqrt()
    }
}

/// Moments of the path at every point; `expected(m)` gives `τ Σ_j η_j e_j(x_m)²`.
pub fn noise_statistics(path: &NoisePath<f64>, expected: impl Fn(usize) -> f64) -> Vec<PointStats> {
    let n = path.steps();
    (0..path.num_points())
        .map(|m| {
            let xs: Vec<f64> = (0..n).map(|k| path.step_increments(k)[m]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let expected_variance = expected(m);
            let cov: f64 = xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (n as f64 - 1.0);
            PointStats {
                point: path.points()[m].clone(),
                variance: var,
                expected_variance,
                standard_error: expected_variance * (2.0 / (n as f64 - 1.0)).sqrt(),
                lag1_correlation: if var > 0.0 { cov / var } else { 0.0 },
            }
        })
        .collect()
}

//! Central finite differences.

use crate::{relative_error, OracleError};

/// Per-coordinate step: `1e-5 * max(1, |p|)`.
pub fn step_for(p: f64) -> f64 {
    1e-5 * p.abs().max(1.0)
}

/// Central-difference estimate of the gradient of `loss` at `params`.
pub fn finite_difference_gradients<F>(mut loss: F, params: &[f64]) -> Result<Vec<f64>, OracleError>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let h = step_for(params[i]);
        probe[i] = params[i] + h;
        let up = loss(&probe);
        probe[i] = params[i] - h;
        let down = loss(&probe);
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(OracleError::NonFinite { coordinate: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Summary of an analytic-vs-numeric gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub coordinates: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<usize>,
}

impl GradientReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> Result<GradientReport, OracleError> {
    if analytic.len() != numeric.len() {
        return Err(OracleError::Shape(format!(
            "analytic gradient has {} coordinates, numeric has {}",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut report = GradientReport {
        coordinates: analytic.len(),
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = relative_error(a, n);
        if abs.is_nan() || rel.is_nan() {
            report.max_abs_err = f64::INFINITY;
            report.max_rel_err = f64::INFINITY;
            report.worst = Some(i);
            continue;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some(i);
        }
    }
    Ok(report)
}

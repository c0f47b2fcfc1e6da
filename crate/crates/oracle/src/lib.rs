//! Brute-force reference implementations.
//!
//! Everything in this crate is written straight from the defining formulas,
//! with plain nested `Vec`s and no shared code with `fgrr-core`. The crate
//! has no dependency on the main path, so cargo itself enforces that the
//! oracles cannot import the code they check.
//!
//! The references are deliberately slow: exhaustive scans, per-pair rule
//! evaluation, central finite differences.

pub mod ap;
pub mod dense_graph;
pub mod formulas;
pub mod gradients;
pub mod matching;

pub use ap::brute_force_map;
pub use dense_graph::{dense_graph_reference, DenseMode};
pub use gradients::{compare_gradients, finite_difference_gradients, GradientReport};
pub use matching::exhaustive_mutual_nn;

use thiserror::Error;

/// Node-count cap for the exhaustive matcher.
pub const MAX_MATCH_NODES: usize = 4096;
/// Node-count cap for the dense graph reference.
pub const MAX_DENSE_NODES: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("input has {got} nodes, oracle refuses more than {cap}")]
    SizeCapExceeded { got: usize, cap: usize },
    #[error("loss is not finite when perturbing coordinate {coordinate}")]
    NonFinite { coordinate: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Reference values plus their measured deviation from a fast path.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub values: Vec<f64>,
    pub max_abs_dev: f64,
    pub max_rel_dev: f64,
}

impl OracleResult {
    /// Compare `fast` against the reference `values`. Deviations are always
    /// measured; a length mismatch yields infinite deviation.
    pub fn measure(values: Vec<f64>, fast: &[f64]) -> Self {
        if values.len() != fast.len() {
            return Self {
                values,
                max_abs_dev: f64::INFINITY,
                max_rel_dev: f64::INFINITY,
            };
        }
        let mut max_abs_dev: f64 = 0.0;
        let mut max_rel_dev: f64 = 0.0;
        for (&r, &f) in values.iter().zip(fast) {
            let abs = (r - f).abs();
            let rel = relative_error(r, f);
            // NaN must never read as agreement.
            max_abs_dev = if abs.is_nan() { f64::INFINITY } else { max_abs_dev.max(abs) };
            max_rel_dev = if rel.is_nan() { f64::INFINITY } else { max_rel_dev.max(rel) };
        }
        Self {
            values,
            max_abs_dev,
            max_rel_dev,
        }
    }
}

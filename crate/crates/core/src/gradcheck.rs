//! Finite-difference checking of tape gradients.
//!
//! A builder maps input leaves to some output; the output is projected onto
//! a fixed random matrix so every entry contributes to a scalar loss, and
//! the tape gradient of that loss is compared with central differences.
//!
//! Central differences in `f64` at the fixed step resolve gradients only to
//! about `1e-11` absolute for unit-scale losses. A configuration is called
//! resolvable when every analytic coordinate is exactly zero or at least
//! [`RESOLVABLE_GRADIENT`] in magnitude; checks draw configurations until
//! they have enough resolvable ones and report how many were redrawn.

use fgrr_oracle::{compare_gradients, finite_difference_gradients, GradientReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{FgrrError, Result};
use crate::tensor::Matrix;

/// Relative tolerance used across the crate's gradient checks.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Smallest nonzero gradient magnitude a check will try to resolve.
pub const RESOLVABLE_GRADIENT: f64 = 1e-6;

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

fn projected<F>(g: &mut Graph, inputs: &[Var], seed: u64, build: &F) -> Result<Var>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let out = build(g, inputs)?;
    let (r, c) = g.value(out).shape();
    if r * c == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = g.constant(random_matrix(&mut rng, r, c));
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

/// Tape gradient of the projected loss with respect to every input entry.
pub fn analytic_gradient<F>(inputs: &[Matrix], seed: u64, build: &F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let loss = projected(&mut g, &vars, seed, build)?;
    let grads = g.backward(loss);
    Ok(vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, m)| grads.get_or_zeros(v, m).into_data())
        .collect())
}

pub fn is_resolvable(analytic: &[f64]) -> bool {
    analytic.iter().all(|&g| g == 0.0 || g.abs() >= RESOLVABLE_GRADIENT)
}

/// Compare tape and central-difference gradients with respect to every
/// entry of every input.
pub fn gradient_report<F>(inputs: &[Matrix], seed: u64, build: F) -> Result<GradientReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(inputs, seed, &build)?;
    numeric_report(inputs, seed, &build, &analytic)
}

fn numeric_report<F>(inputs: &[Matrix], seed: u64, build: &F, analytic: &[f64]) -> Result<GradientReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let flat: Vec<f64> = inputs.iter().flat_map(|m| m.data().iter().copied()).collect();
    let mut failure = None;
    let numeric = finite_difference_gradients(
        |probe| {
            let mut g = Graph::new();
            let mut offset = 0;
            let vars: Vec<Var> = inputs
                .iter()
                .map(|m| {
                    let data = probe[offset..offset + m.len()].to_vec();
                    offset += m.len();
                    g.param(Matrix::from_vec(m.rows(), m.cols(), data).expect("same shape"))
                })
                .collect();
            match projected(&mut g, &vars, seed, build) {
                Ok(l) => g.scalar(l),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &flat,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let numeric = numeric.map_err(|e| FgrrError::Precondition(e.to_string()))?;
    compare_gradients(analytic, &numeric).map_err(|e| FgrrError::Shape(e.to_string()))
}

/// Report for a resolvable configuration, `None` when it must be redrawn.
pub fn resolvable_report<F>(inputs: &[Matrix], seed: u64, build: F) -> Result<Option<GradientReport>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(inputs, seed, &build)?;
    if !is_resolvable(&analytic) {
        return Ok(None);
    }
    numeric_report(inputs, seed, &build, &analytic).map(Some)
}

/// Outcome of a batch of checks over drawn configurations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteOutcome {
    pub checked: usize,
    pub redrawn: usize,
    pub failures: usize,
    pub worst_rel_err: f64,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Draw configurations with `draw` until `wanted` resolvable ones were
/// checked. `draw` returns the inputs and the builder for one configuration.
/// Gives up with an error after `10 * wanted` redraws.
pub fn run_suite<D, F>(wanted: usize, mut draw: D) -> Result<SuiteOutcome>
where
    D: FnMut(usize) -> (Vec<Matrix>, F),
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut out = SuiteOutcome::default();
    let mut attempt = 0;
    while out.checked < wanted {
        if out.redrawn > 10 * wanted {
            return Err(FgrrError::Precondition(format!(
                "only {} of {} configurations were resolvable",
                out.checked, attempt
            )));
        }
        let (inputs, build) = draw(attempt);
        match resolvable_report(&inputs, attempt as u64, build)? {
            None => out.redrawn += 1,
            Some(r) => {
                out.checked += 1;
                out.worst_rel_err = out.worst_rel_err.max(r.max_rel_err);
                if !r.passes(GRADIENT_TOLERANCE) {
                    out.failures += 1;
                }
            }
        }
        attempt += 1;
    }
    Ok(out)
}

/// Panicking wrapper over [`gradient_report`] for tests.
pub fn check_gradients<F>(inputs: &[Matrix], seed: u64, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = gradient_report(inputs, seed, build).expect("gradient check ran");
    assert!(report.passes(GRADIENT_TOLERANCE), "gradient mismatch: {report:?}");
}

/// Panicking wrapper over [`run_suite`] for tests.
pub fn check_suite<D, F>(wanted: usize, draw: D)
where
    D: FnMut(usize) -> (Vec<Matrix>, F),
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let out = run_suite(wanted, draw).expect("suite ran");
    assert!(out.passed(), "gradient mismatch: {out:?}");
}

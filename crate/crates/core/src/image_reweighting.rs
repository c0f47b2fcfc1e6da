//! Object-aware reweighting of the image-level adversarial loss.
//!
//! An image pair whose matched objects look alike and share many categories
//! is weighted up: `w1` grows with prototype similarity of the shared
//! classes, `w2` with how many classes are shared. The weighted loss trains
//! a domain discriminator while the feature extractor, behind a gradient
//! reversal, is pushed to fool it.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{FgrrError, Result};
use crate::nn::{linear, LinearParams};
use crate::tensor::Matrix;

/// Lower and upper clamp of discriminator probabilities inside logs.
pub const LOG_CLAMP: f64 = 1e-7;

/// Object-aware pair weights, both at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IorWeights {
    pub w1: f64,
    pub w2: f64,
}

impl IorWeights {
    /// Weights of a pair with nothing matched: plain adversarial loss.
    pub fn unit() -> Self {
        Self { w1: 1.0, w2: 1.0 }
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.w1 + self.w2)
    }

    /// Weights from per-class source and target centroids over `classes`
    /// foreground categories. Only classes present on both sides count.
    pub fn from_centroids(
        source: &BTreeMap<usize, Vec<f64>>,
        target: &BTreeMap<usize, Vec<f64>>,
        classes: usize,
    ) -> Result<Self> {
        let shared: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = source
            .iter()
            .filter_map(|(k, s)| target.get(k).map(|t| (*k, (s.clone(), t.clone()))))
            .collect();
        Ok(Self {
            w1: compute_w1(&shared)?,
            w2: compute_w2(shared.len(), classes)?,
        })
    }
}

/// `1 + Σ_k exp(−‖c_s^k − c_t^k‖²)` over the shared classes.
pub fn compute_w1(shared: &BTreeMap<usize, (Vec<f64>, Vec<f64>)>) -> Result<f64> {
    let mut w = 1.0;
    for (k, (s, t)) in shared {
        if s.len() != t.len() {
            return Err(FgrrError::Shape(format!("class {k} centroids of width {} and {}", s.len(), t.len())));
        }
        let d2: f64 = s.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum();
        w += (-d2).exp();
    }
    Ok(w)
}

/// `exp(N_k / K)` for `N_k` shared out of `K` classes.
pub fn compute_w2(shared: usize, classes: usize) -> Result<f64> {
    if classes == 0 || shared > classes {
        return Err(FgrrError::Precondition(format!("{shared} shared classes out of {classes}")));
    }
    Ok((shared as f64 / classes as f64).exp())
}

/// Two-layer perceptron from a global image feature to `P(source)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams<T = Matrix> {
    pub hidden: LinearParams<T>,
    pub out: LinearParams<T>,
}

impl<T> DiscriminatorParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DiscriminatorParams<U> {
        DiscriminatorParams {
            hidden: self.hidden.map(f),
            out: self.out.map(f),
        }
    }

    pub fn tensors(&self) -> Vec<&T> {
        let mut v = self.hidden.tensors();
        v.extend(self.out.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut v = self.hidden.tensors_mut();
        v.extend(self.out.tensors_mut());
        v
    }
}

impl DiscriminatorParams {
    pub fn random(rng: &mut impl Rng, input: usize, hidden: usize) -> Self {
        Self {
            hidden: LinearParams::he(rng, input, hidden),
            out: LinearParams::glorot(rng, hidden, 1),
        }
    }

    pub fn input(&self) -> usize {
        self.hidden.input()
    }
}

/// `P(source)` for each row of `x`, shape `[n, 1]`.
pub fn discriminate(g: &mut Graph, x: Var, p: &DiscriminatorParams<Var>) -> Result<Var> {
    let h = linear(g, x, &p.hidden)?;
    let h = g.relu(h);
    let z = linear(g, h, &p.out)?;
    Ok(g.sigmoid(z))
}

/// Weighted adversarial loss on global features `[ns, d]` and `[nt, d]`.
///
/// `−w̄ · [mean log D(source) + mean log(1 − D(target))]` with
/// `w̄ = (w1 + w2) / 2` and log arguments clamped to `[1e-7, 1 − 1e-7]`.
/// Gradients flowing back into the features are multiplied by `−reversal`,
/// so minimising the loss trains the discriminator and confuses the
/// extractor at once.
pub fn ior_loss_var(
    g: &mut Graph,
    source: Var,
    target: Var,
    disc: &DiscriminatorParams<Var>,
    weights: IorWeights,
    reversal: f64,
) -> Result<Var> {
    if g.value(source).rows() == 0 || g.value(target).rows() == 0 {
        return Err(FgrrError::Precondition("adversarial loss needs an image from each domain".into()));
    }
    let (hi, lo) = (1.0 - LOG_CLAMP, LOG_CLAMP);
    let s = g.grad_reverse(source, reversal);
    let t = g.grad_reverse(target, reversal);
    let ds = discriminate(g, s, disc)?;
    let dt = discriminate(g, t, disc)?;
    let log_s = g.ln_clamped(ds, lo, hi);
    let log_s = g.mean(log_s);
    let not_t = g.scale(dt, -1.0);
    let not_t = g.add_scalar(not_t, 1.0);
    let log_t = g.ln_clamped(not_t, lo, hi);
    let log_t = g.mean(log_t);
    let both = g.add(log_s, log_t)?;
    Ok(g.scale(both, -weights.mean()))
}

/// Value of [`ior_loss_var`] for one feature vector per domain.
pub fn ior_loss(source: &[f64], target: &[f64], disc: &DiscriminatorParams, weights: IorWeights) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(Matrix::row_vector(source));
    let t = g.constant(Matrix::row_vector(target));
    let p = disc.map(&mut |m| g.constant(m.clone()));
    let l = ior_loss_var(&mut g, s, t, &p, weights, 1.0)?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_suite, random_matrix};
    use fgrr_oracle::formulas;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairs(v: &[(usize, Vec<f64>, Vec<f64>)]) -> BTreeMap<usize, (Vec<f64>, Vec<f64>)> {
        v.iter().map(|(k, s, t)| (*k, (s.clone(), t.clone()))).collect()
    }

    /// Discriminator whose output is `sigmoid(0) = 0.5` for every input.
    fn flat_disc(input: usize) -> DiscriminatorParams {
        DiscriminatorParams {
            hidden: LinearParams {
                w: Matrix::zeros(input, 2),
                b: Matrix::zeros(1, 2),
            },
            out: LinearParams {
                w: Matrix::zeros(2, 1),
                b: Matrix::zeros(1, 1),
            },
        }
    }

    #[test]
    fn w1_examples() {
        assert_eq!(compute_w1(&BTreeMap::new()).unwrap(), 1.0);
        let same = pairs(&[(1, vec![1.0, 2.0], vec![1.0, 2.0]), (2, vec![0.0], vec![0.0]), (3, vec![-1.0], vec![-1.0])]);
        assert_eq!(compute_w1(&same).unwrap(), 4.0);
        let half = pairs(&[(1, vec![2f64.ln().sqrt(), 0.0], vec![0.0, 0.0])]);
        assert!((compute_w1(&half).unwrap() - 1.5).abs() < 1e-12);
        assert!(compute_w1(&pairs(&[(1, vec![0.0], vec![0.0, 1.0])])).is_err());
    }

    #[test]
    fn w2_examples() {
        assert_eq!(compute_w2(0, 3).unwrap(), 1.0);
        assert!((compute_w2(4, 4).unwrap() - 2.718281828459045).abs() < 1e-12);
        assert!((compute_w2(1, 2).unwrap() - 1.6487212707001282).abs() < 1e-12);
        assert!(compute_w2(3, 2).is_err());
        assert!(compute_w2(0, 0).is_err());
    }

    #[test]
    fn weights_from_centroids_use_shared_classes() {
        let s: BTreeMap<usize, Vec<f64>> = [(1, vec![0.0]), (2, vec![1.0])].into_iter().collect();
        let t: BTreeMap<usize, Vec<f64>> = [(2, vec![1.0]), (3, vec![5.0])].into_iter().collect();
        let w = IorWeights::from_centroids(&s, &t, 3).unwrap();
        assert_eq!(w.w1, 2.0);
        assert!((w.w2 - (1.0f64 / 3.0).exp()).abs() < 1e-12);
        assert_eq!(IorWeights::from_centroids(&s, &BTreeMap::new(), 3).unwrap(), IorWeights::unit());
    }

    #[test]
    fn weights_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let d = rng.gen_range(1..5);
            let n = rng.gen_range(0..5);
            let v: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..n)
                .map(|k| {
                    let s = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let t = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    (k + 1, s, t)
                })
                .collect();
            let oracle: Vec<(Vec<f64>, Vec<f64>)> = v.iter().map(|(_, s, t)| (s.clone(), t.clone())).collect();
            assert!((compute_w1(&pairs(&v)).unwrap() - formulas::w1(&oracle)).abs() < 1e-9);
            let k = rng.gen_range(1..6);
            let nk = rng.gen_range(0..=k);
            assert!((compute_w2(nk, k).unwrap() - formulas::w2(nk, k)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn w1_grows_as_centroids_approach(
            s in prop::collection::vec(-2.0f64..2.0, 3),
            t in prop::collection::vec(-2.0f64..2.0, 3),
            shrink in 0.0f64..1.0,
        ) {
            let far = compute_w1(&pairs(&[(1, s.clone(), t.clone())])).unwrap();
            let closer: Vec<f64> = s.iter().zip(&t).map(|(a, b)| b + shrink * (a - b)).collect();
            let near = compute_w1(&pairs(&[(1, closer, t)])).unwrap();
            prop_assert!(far >= 1.0);
            prop_assert!(near >= far);
        }

        #[test]
        fn w2_strictly_increasing(k in 1usize..20) {
            for nk in 0..k {
                prop_assert!(compute_w2(nk + 1, k).unwrap() > compute_w2(nk, k).unwrap());
            }
            prop_assert!(compute_w2(0, k).unwrap() >= 1.0);
        }
    }

    #[test]
    fn ior_examples() {
        let disc = flat_disc(3);
        let l = ior_loss(&[1.0, 2.0, 3.0], &[-1.0, 0.0, 4.0], &disc, IorWeights::unit()).unwrap();
        assert!((l - 1.3862943611198906).abs() < 1e-12);
        let doubled = IorWeights { w1: 2.0, w2: 2.0 };
        let l2 = ior_loss(&[1.0, 2.0, 3.0], &[-1.0, 0.0, 4.0], &disc, doubled).unwrap();
        assert_eq!(l2, 2.0 * l);
    }

    #[test]
    fn ior_matches_oracle_and_stays_finite_when_saturated() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..100 {
            let disc = DiscriminatorParams::random(&mut rng, 4, 6);
            let s: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let w = IorWeights { w1: rng.gen_range(1.0..4.0), w2: rng.gen_range(1.0..2.7) };
            let mut g = Graph::new();
            let p = disc.map(&mut |m| g.constant(m.clone()));
            let sv = g.constant(Matrix::row_vector(&s));
            let tv = g.constant(Matrix::row_vector(&t));
            let ds = discriminate(&mut g, sv, &p).unwrap();
            let dt = discriminate(&mut g, tv, &p).unwrap();
            let expect = formulas::ior(g.scalar(ds), g.scalar(dt), w.w1, w.w2);
            assert!((ior_loss(&s, &t, &disc, w).unwrap() - expect).abs() < 1e-9);
        }
        let mut saturated = flat_disc(1);
        saturated.out.b = Matrix::scalar(-800.0);
        let l = ior_loss(&[0.0], &[0.0], &saturated, IorWeights::unit()).unwrap();
        assert!((l + LOG_CLAMP.ln()).abs() < 1e-6);
    }

    #[test]
    fn ior_ignores_image_order_within_a_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let disc = DiscriminatorParams::random(&mut rng, 3, 5);
        let s = random_matrix(&mut rng, 2, 3);
        let t = random_matrix(&mut rng, 2, 3);
        let swapped = Matrix::from_rows(&[s.row(1).to_vec(), s.row(0).to_vec()]).unwrap();
        let eval = |s: &Matrix| {
            let mut g = Graph::new();
            let p = disc.map(&mut |m| g.constant(m.clone()));
            let a = g.constant(s.clone());
            let b = g.constant(t.clone());
            let l = ior_loss_var(&mut g, a, b, &p, IorWeights::unit(), 1.0).unwrap();
            g.scalar(l)
        };
        assert!((eval(&s) - eval(&swapped)).abs() < 1e-12);
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        check_suite(20, |_| {
            let d = rng.gen_range(1..5);
            let hidden = rng.gen_range(1..5);
            let disc = DiscriminatorParams::random(&mut rng, d, hidden);
            let w = IorWeights { w1: rng.gen_range(1.0..3.0), w2: rng.gen_range(1.0..2.7) };
            let mut inputs = vec![random_matrix(&mut rng, 1, d), random_matrix(&mut rng, 1, d)];
            inputs.extend(disc.tensors().into_iter().cloned());
            (inputs, move |g: &mut Graph, v: &[Var]| {
                let p = DiscriminatorParams {
                    hidden: LinearParams { w: v[2], b: v[3] },
                    out: LinearParams { w: v[4], b: v[5] },
                };
                // undo the reversal so the check sees the loss's own gradient
                ior_loss_var(g, v[0], v[1], &p, w, -1.0)
            })
        });
    }

    #[test]
    fn reversal_flips_feature_gradients_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let disc = DiscriminatorParams::random(&mut rng, 3, 4);
        let s = random_matrix(&mut rng, 1, 3);
        let t = random_matrix(&mut rng, 1, 3);
        let grads = |coeff: f64| {
            let mut g = Graph::new();
            let p = disc.map(&mut |m| g.param(m.clone()));
            let a = g.param(s.clone());
            let b = g.constant(t.clone());
            let l = ior_loss_var(&mut g, a, b, &p, IorWeights::unit(), coeff).unwrap();
            let gr = g.backward(l);
            (gr.get_or_zeros(a, &s), gr.get_or_zeros(p.hidden.w, &disc.hidden.w))
        };
        let (fa, da) = grads(1.0);
        let (fb, db) = grads(-1.0);
        assert_eq!(da, db);
        for (x, y) in fa.data().iter().zip(fb.data()) {
            assert_eq!(*x, -*y);
        }
    }

    /// One descent step on a frozen toy: the discriminator lowers the loss,
    /// the extractor behind the reversal raises it.
    #[test]
    fn adversarial_contract_sign_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let lr = 1e-2;
        for _ in 0..20 {
            let disc = DiscriminatorParams::random(&mut rng, 3, 6);
            let extractor = random_matrix(&mut rng, 4, 3);
            let xs = random_matrix(&mut rng, 1, 4);
            let xt = random_matrix(&mut rng, 1, 4);
            let w = IorWeights { w1: 1.5, w2: 1.2 };
            let eval = |disc: &DiscriminatorParams, e: &Matrix| {
                let mut g = Graph::new();
                let p = disc.map(&mut |m| g.param(m.clone()));
                let ev = g.param(e.clone());
                let a = g.constant(xs.clone());
                let b = g.constant(xt.clone());
                let fs = g.matmul(a, ev).unwrap();
                let ft = g.matmul(b, ev).unwrap();
                let l = ior_loss_var(&mut g, fs, ft, &p, w, 1.0).unwrap();
                let gr = g.backward(l);
                let dg: Vec<Matrix> = p.tensors().iter().zip(disc.tensors()).map(|(v, m)| gr.get_or_zeros(**v, m)).collect();
                (g.scalar(l), dg, gr.get_or_zeros(ev, e))
            };
            let (l0, dgrads, egrad) = eval(&disc, &extractor);
            if egrad.data().iter().all(|&v| v.abs() < 1e-9) {
                continue;
            }
            let mut stepped = disc.clone();
            for (m, gm) in stepped.tensors_mut().into_iter().zip(&dgrads) {
                *m = m.zip_map(gm, |a, b| a - lr * b);
            }
            assert!(eval(&stepped, &extractor).0 < l0);
            let moved = extractor.zip_map(&egrad, |a, b| a - lr * b);
            assert!(eval(&disc, &moved).0 > l0);
        }
    }
}

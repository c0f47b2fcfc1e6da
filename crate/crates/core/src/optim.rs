//! Stochastic gradient descent with heavy-ball momentum.

use crate::error::{FgrrError, Result};
use crate::tensor::Matrix;

/// Velocity buffers for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub momentum: f64,
    velocity: Vec<Matrix>,
}

impl Momentum {
    pub fn new(momentum: f64, params: &[&Matrix]) -> Self {
        Self {
            momentum,
            velocity: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    /// `v <- mu v + g`, `p <- p - lr v` for every tensor of the group.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(FgrrError::Shape(format!(
                "{} parameters, {} gradients, {} velocity buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(FgrrError::Shape("gradient shape differs from its parameter".into()));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut p = Matrix::row_vector(&[1.0, -1.0]);
        let mut opt = Momentum::new(0.5, &[&p]);
        let g = Matrix::row_vector(&[1.0, 2.0]);
        opt.step(vec![&mut p], &[g.clone()], 0.1).unwrap();
        assert_eq!(p.data(), &[0.9, -1.2]);
        opt.step(vec![&mut p], &[g], 0.1).unwrap();
        // v = 0.5 * [1, 2] + [1, 2]
        assert!((p.get(0, 0) - 0.75).abs() < 1e-15);
        assert!((p.get(0, 1) + 1.5).abs() < 1e-15);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut p = Matrix::row_vector(&[3.0, -2.0]);
        let mut opt = Momentum::new(0.9, &[&p]);
        for _ in 0..200 {
            let g = p.clone();
            opt.step(vec![&mut p], &[g], 0.05).unwrap();
        }
        assert!(p.max_abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Matrix::zeros(2, 2);
        let mut opt = Momentum::new(0.9, &[&p]);
        assert!(opt.step(vec![&mut p], &[Matrix::zeros(1, 2)], 0.1).is_err());
    }
}

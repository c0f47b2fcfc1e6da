//! Small building blocks shared by the detector and the reasoning heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Matrix;

/// Uniform Glorot initialisation.
pub fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

/// He-style uniform initialisation for layers followed by ReLU.
pub fn he(rng: &mut impl Rng, fan_in: usize, cols: usize) -> Matrix {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Matrix::from_vec(fan_in, cols, data).expect("sized above")
}

/// Put a parameter on the tape, trainable or frozen.
pub fn leaf(g: &mut Graph, m: &Matrix, trainable: bool) -> Var {
    if trainable {
        g.param(m.clone())
    } else {
        g.constant(m.clone())
    }
}

/// Affine map `x W + b` with `w: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams<T = Matrix> {
    pub w: T,
    pub b: T,
}

impl<T> LinearParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LinearParams<U> {
        LinearParams { w: f(&self.w), b: f(&self.b) }
    }

    pub fn tensors(&self) -> Vec<&T> {
        vec![&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        vec![&mut self.w, &mut self.b]
    }
}

impl LinearParams {
    pub fn glorot(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        Self {
            w: glorot(rng, input, output),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn he(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        Self {
            w: he(rng, input, output),
            b: Matrix::zeros(1, output),
        }
    }

    /// Small-normal-ish weights for output heads.
    pub fn scaled(rng: &mut impl Rng, input: usize, output: usize, scale: f64) -> Self {
        Self {
            w: glorot(rng, input, output).map(|v| v * scale),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn input(&self) -> usize {
        self.w.rows()
    }

    pub fn output(&self) -> usize {
        self.w.cols()
    }
}

pub fn linear(g: &mut Graph, x: Var, p: &LinearParams<Var>) -> Result<Var> {
    let xw = g.matmul(x, p.w)?;
    g.add_row(xw, p.b)
}

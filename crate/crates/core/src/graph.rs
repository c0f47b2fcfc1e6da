//! Graph machinery shared by the pixel and semantic reasoning paths.
//!
//! Every operation has a differentiable form working on [`Var`]s and a plain
//! form on matrices; the plain forms run the differentiable ones on a
//! throwaway tape so the two can never disagree.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{FgrrError, Result};
use crate::nn::glorot;
use crate::tensor::Matrix;

/// LeakyReLU slope inside attention scores.
pub const ATTENTION_SLOPE: f64 = 0.2;

/// Learnable cross-domain edge scorer; `theta` is `[2C, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScorerParams<T = Matrix> {
    pub theta: T,
}

impl<T> EdgeScorerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EdgeScorerParams<U> {
        EdgeScorerParams { theta: f(&self.theta) }
    }

    pub fn tensors(&self) -> Vec<&T> {
        vec![&self.theta]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        vec![&mut self.theta]
    }
}

impl EdgeScorerParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            theta: Matrix::zeros(2 * channels, 1),
        }
    }

    pub fn random(rng: &mut impl Rng, channels: usize) -> Self {
        Self {
            theta: glorot(rng, 2 * channels, 1),
        }
    }

    pub fn channels(&self) -> usize {
        self.theta.rows() / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnParams<T = Matrix> {
    pub weights: Vec<T>,
}

impl<T> GcnParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GcnParams<U> {
        GcnParams {
            weights: self.weights.iter().map(f).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&T> {
        self.weights.iter().collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        self.weights.iter_mut().collect()
    }
}

impl GcnParams {
    /// `layers` square layers of width `width`.
    pub fn random(rng: &mut impl Rng, width: usize, layers: usize) -> Self {
        Self {
            weights: (0..layers).map(|_| glorot(rng, width, width)).collect(),
        }
    }

    pub fn identity(width: usize, layers: usize) -> Self {
        Self {
            weights: vec![Matrix::identity(width); layers],
        }
    }
}

/// Single-head attention: projection `w` is `[C, C']`, score vector `a` is `[2C', 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatParams<T = Matrix> {
    pub w: T,
    pub a: T,
}

impl<T> GatParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GatParams<U> {
        GatParams { w: f(&self.w), a: f(&self.a) }
    }

    pub fn tensors(&self) -> Vec<&T> {
        vec![&self.w, &self.a]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        vec![&mut self.w, &mut self.a]
    }
}

impl GatParams {
    pub fn random(rng: &mut impl Rng, c_in: usize, c_out: usize) -> Self {
        Self {
            w: glorot(rng, c_in, c_out),
            a: glorot(rng, 2 * c_out, 1),
        }
    }

    pub fn identity(width: usize) -> Self {
        Self {
            w: Matrix::identity(width),
            a: Matrix::zeros(2 * width, 1),
        }
    }
}

/// Bipartite graph folded into one square graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedGraph {
    pub nodes: Matrix,
    pub adjacency: Matrix,
    pub source_count: usize,
}

impl AugmentedGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.rows()
    }
}

/// `σ([f_i, f_j] · θ)`.
pub fn edge_weight(f_i: &[f64], f_j: &[f64], p: &EdgeScorerParams) -> Result<f64> {
    if f_i.len() != f_j.len() || p.theta.rows() != 2 * f_i.len() || p.theta.cols() != 1 {
        return Err(FgrrError::Shape(format!(
            "edge weight over {} and {} features with theta of {}",
            f_i.len(),
            f_j.len(),
            p.theta.rows()
        )));
    }
    let mut g = Graph::new();
    let a = g.constant(Matrix::row_vector(f_i));
    let b = g.constant(Matrix::row_vector(f_j));
    let theta = g.constant(p.theta.clone());
    let e = edge_matrix(&mut g, a, b, theta)?;
    Ok(g.scalar(e))
}

/// All cross-domain edge weights `[Ns, Nt]` for sources `vs` and targets `vt`.
pub fn edge_matrix(g: &mut Graph, vs: Var, vt: Var, theta: Var) -> Result<Var> {
    let c = g.value(vs).cols();
    if g.value(vt).cols() != c || g.value(theta).shape() != (2 * c, 1) {
        return Err(FgrrError::Shape(format!(
            "edge scorer for {c} channels got theta {:?}",
            g.value(theta).shape()
        )));
    }
    let first: Vec<usize> = (0..c).collect();
    let second: Vec<usize> = (c..2 * c).collect();
    let ta = g.gather_rows(theta, &first)?;
    let tb = g.gather_rows(theta, &second)?;
    let s = g.matmul(vs, ta)?;
    let t = g.matmul(vt, tb)?;
    let t_row = g.transpose(t);
    let logits = g.outer_add(s, t_row)?;
    Ok(g.sigmoid(logits))
}

/// `[[0, E], [Eᵀ, 0]]` from a `[Ns, Nt]` edge matrix.
pub fn augment_adjacency(g: &mut Graph, e: Var) -> Result<Var> {
    let (ns, nt) = g.value(e).shape();
    let zs = g.constant(Matrix::zeros(ns, ns));
    let zt = g.constant(Matrix::zeros(nt, nt));
    let et = g.transpose(e);
    let top = g.concat_cols(&[zs, e])?;
    let bottom = g.concat_cols(&[et, zt])?;
    g.concat_rows(&[top, bottom])
}

pub fn augment_bipartite(vs: &Matrix, vt: &Matrix, e: &Matrix) -> Result<AugmentedGraph> {
    if vs.cols() != vt.cols() && !(vs.rows() == 0 || vt.rows() == 0) {
        return Err(FgrrError::Shape(format!(
            "node widths differ: {} vs {}",
            vs.cols(),
            vt.cols()
        )));
    }
    if e.shape() != (vs.rows(), vt.rows()) {
        return Err(FgrrError::Shape(format!(
            "edge matrix {:?} for {} source and {} target nodes",
            e.shape(),
            vs.rows(),
            vt.rows()
        )));
    }
    if e.data().iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(FgrrError::Precondition("edge weights must lie in [0, 1]".into()));
    }
    let mut g = Graph::new();
    let ev = g.constant(e.clone());
    let a = augment_adjacency(&mut g, ev)?;
    let cols = vs.cols().max(vt.cols());
    let mut nodes = Matrix::zeros(vs.rows() + vt.rows(), cols);
    for r in 0..vs.rows() {
        nodes.row_mut(r).copy_from_slice(vs.row(r));
    }
    for r in 0..vt.rows() {
        nodes.row_mut(vs.rows() + r).copy_from_slice(vt.row(r));
    }
    Ok(AugmentedGraph {
        nodes,
        adjacency: g.value(a).clone(),
        source_count: vs.rows(),
    })
}

/// `D^{-1/2} (A + I) D^{-1/2}`.
pub fn normalize_adjacency(a: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(FgrrError::Shape(format!("adjacency {:?} is not square", a.shape())));
    }
    if a.data().iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(FgrrError::Precondition("adjacency must be finite and nonnegative".into()));
    }
    Ok(crate::autograd::sym_normalize_value(a).0)
}

/// `X ← ReLU(Â X W)` for each layer weight in turn.
pub fn gcn_layers(g: &mut Graph, x: Var, a_hat: Var, weights: &[Var]) -> Result<Var> {
    if weights.is_empty() {
        return Err(FgrrError::Precondition("a GCN needs at least one layer".into()));
    }
    let mut h = x;
    for &w in weights {
        let ax = g.matmul(a_hat, h)?;
        let axw = g.matmul(ax, w)?;
        h = g.relu(axw);
    }
    Ok(h)
}

pub fn gcn_forward(x: &Matrix, a_hat: &Matrix, p: &GcnParams) -> Result<Matrix> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let av = g.constant(a_hat.clone());
    let ws: Vec<Var> = p.weights.iter().map(|w| g.constant(w.clone())).collect();
    let out = gcn_layers(&mut g, xv, av, &ws)?;
    Ok(g.value(out).clone())
}

/// Neighbourhood mask from an adjacency (`> 0`), with a self-loop for every
/// node whose neighbourhood would otherwise be empty.
pub fn neighbourhood_mask(adjacency: &Matrix) -> Result<Vec<bool>> {
    let n = adjacency.rows();
    if adjacency.cols() != n {
        return Err(FgrrError::Shape(format!("adjacency {:?} is not square", adjacency.shape())));
    }
    let mut mask: Vec<bool> = adjacency.data().iter().map(|&x| x > 0.0).collect();
    for i in 0..n {
        if !mask[i * n..(i + 1) * n].iter().any(|&m| m) {
            mask[i * n + i] = true;
        }
    }
    Ok(mask)
}

/// Attention output `Σ_j α_ij W x_j` and the attention matrix `α`.
pub fn attention_layer(g: &mut Graph, x: Var, mask: &[bool], w: Var, a: Var) -> Result<(Var, Var)> {
    let c_out = g.value(w).cols();
    if g.value(a).shape() != (2 * c_out, 1) {
        return Err(FgrrError::Shape(format!(
            "attention vector {:?} for width {c_out}",
            g.value(a).shape()
        )));
    }
    let h = g.matmul(x, w)?;
    let first: Vec<usize> = (0..c_out).collect();
    let second: Vec<usize> = (c_out..2 * c_out).collect();
    let a1 = g.gather_rows(a, &first)?;
    let a2 = g.gather_rows(a, &second)?;
    let s1 = g.matmul(h, a1)?;
    let s2 = g.matmul(h, a2)?;
    let s2t = g.transpose(s2);
    let scores = g.outer_add(s1, s2t)?;
    let scores = g.leaky_relu(scores, ATTENTION_SLOPE);
    let alpha = g.masked_softmax(scores, mask)?;
    let out = g.matmul(alpha, h)?;
    Ok((out, alpha))
}

/// Plain attention; returns `(output, alpha)`.
pub fn graph_attention(x: &Matrix, neighbourhoods: &Matrix, p: &GatParams) -> Result<(Matrix, Matrix)> {
    if neighbourhoods.rows() != x.rows() {
        return Err(FgrrError::Shape(format!(
            "{} nodes with a {:?} adjacency",
            x.rows(),
            neighbourhoods.shape()
        )));
    }
    let mask = neighbourhood_mask(neighbourhoods)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(p.w.clone());
    let a = g.constant(p.a.clone());
    let (out, alpha) = attention_layer(&mut g, xv, &mask, w, a)?;
    Ok((g.value(out).clone(), g.value(alpha).clone()))
}

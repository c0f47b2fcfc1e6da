//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and the recipe for its backward pass. [`Graph::backward`] walks the
//! tape once in reverse. Nodes built only from constants carry no gradient.

use crate::error::{FgrrError, Result};
use crate::tensor::Matrix;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Geometry of a square-kernel convolution over a `[H*W, C]` pixel-major map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// For each output position and kernel tap, the source pixel (or `None`
    /// for padding). Order matches the im2col column layout.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        for oy in 0..oh {
            for ox in 0..ow {
                let out_row = oy * ow + ox;
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let tap = ky * self.kernel + kx;
                        let y = (oy * self.stride + ky) as isize - self.padding as isize;
                        let x = (ox * self.stride + kx) as isize - self.padding as isize;
                        let src = if y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width {
                            Some(y as usize * self.width + x as usize)
                        } else {
                            None
                        };
                        f(out_row, tap, src);
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    OuterAdd(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    LnClamped(Var, f64, f64),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    RowNorms(Var),
    SymNormalize(Var),
    MaskedSoftmax(Var, Vec<bool>),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Matrix },
    BceWithLogits { logits: Var, targets: Vec<f64>, weights: Vec<f64> },
    SmoothL1(Var),
    Im2Col(Var, ConvGeometry),
    RegionPool { input: Var, regions: Vec<Vec<usize>>, bins: usize },
    GradReverse(Var, f64),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

fn shape_err<T>(what: &str, a: &Matrix, b: &Matrix) -> Result<T> {
    Err(FgrrError::Shape(format!(
        "{what}: {}x{} vs {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    )))
}

/// Numerically stable `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row sums of `A + I`.
pub(crate) fn sym_normalize_value(a: &Matrix) -> (Matrix, Vec<f64>) {
    let n = a.rows();
    let degree: Vec<f64> = (0..n).map(|i| 1.0 + a.row(i).iter().sum::<f64>()).collect();
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let b = a.get(i, j) + if i == j { 1.0 } else { 0.0 };
            out.set(i, j, b * inv_sqrt[i] * inv_sqrt[j]);
        }
    }
    (out, degree)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf; gradients flow into it.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient is computed for it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(what, va, vb);
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `a + 1·bias` for a `[1, c]` bias row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return shape_err("add_row", va, vb);
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    /// `out[i][j] = col[i] + row[j]` for `[n, 1]` and `[1, m]` inputs.
    pub fn outer_add(&mut self, col: Var, row: Var) -> Result<Var> {
        let (vc, vr) = (self.value(col), self.value(row));
        if vc.cols() != 1 || vr.rows() != 1 {
            return shape_err("outer_add", vc, vr);
        }
        let mut value = Matrix::zeros(vc.rows(), vr.cols());
        for i in 0..vc.rows() {
            for j in 0..vr.cols() {
                value.set(i, j, vc.get(i, 0) + vr.get(0, j));
            }
        }
        let rg = self.rg(col) || self.rg(row);
        Ok(self.push(value, Op::OuterAdd(col, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi).ln());
        let rg = self.rg(a);
        self.push(value, Op::LnClamped(a, lo, hi), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return shape_err("concat_rows", self.value(parts[0]), v);
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return shape_err("concat_cols", self.value(parts[0]), v);
            }
            cols += v.cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for r in 0..rows {
                value.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= v.rows()) {
            return Err(FgrrError::Shape(format!("gather row {bad} of {}", v.rows())));
        }
        let mut value = Matrix::zeros(rows.len(), v.cols());
        for (o, &r) in rows.iter().enumerate() {
            value.row_mut(o).copy_from_slice(v.row(r));
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec()), rg))
    }

    /// `out = base` with `src[n]` added onto row `rows[n]`.
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (vb, vs) = (self.value(base), self.value(src));
        if vs.rows() != rows.len() || vs.cols() != vb.cols() {
            return shape_err("scatter_add_rows", vb, vs);
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= vb.rows()) {
            return Err(FgrrError::Shape(format!("scatter row {bad} of {}", vb.rows())));
        }
        let mut value = vb.clone();
        for (n, &r) in rows.iter().enumerate() {
            for (o, s) in value.row_mut(r).iter_mut().zip(vs.row(n)) {
                *o += s;
            }
        }
        let rg = self.rg(base) || self.rg(src);
        Ok(self.push(value, Op::ScatterAddRows(base, src, rows.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean of all entries; an empty input gives 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Matrix::scalar(if v.is_empty() { 0.0 } else { v.sum() / v.len() as f64 });
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Column-wise mean over rows, `[n, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rows() == 0 {
            return Err(FgrrError::Shape("mean_rows of zero rows".into()));
        }
        let mut value = Matrix::zeros(1, v.cols());
        for r in 0..v.rows() {
            for (o, x) in value.row_mut(0).iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        let n = v.rows() as f64;
        let value = value.map(|x| x / n);
        let rg = self.rg(a);
        Ok(self.push(value, Op::MeanRows(a), rg))
    }

    /// Euclidean norm of every row, `[n, c] -> [n, 1]`. The gradient at a
    /// zero row is taken as zero.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let norms: Vec<f64> = (0..v.rows())
            .map(|r| v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let value = Matrix::column_vector(&norms);
        let rg = self.rg(a);
        self.push(value, Op::RowNorms(a), rg)
    }

    /// Self-loop symmetric renormalization of a square adjacency.
    pub fn sym_normalize(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rows() != v.cols() {
            return shape_err("sym_normalize", v, v);
        }
        let (value, _) = sym_normalize_value(v);
        let rg = self.rg(a);
        Ok(self.push(value, Op::SymNormalize(a), rg))
    }

    /// Row-wise softmax restricted to `mask`; masked-out entries are 0.
    /// Every row must have at least one unmasked entry.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let v = self.value(a);
        if mask.len() != v.len() {
            return Err(FgrrError::Shape(format!("mask of {} for {} entries", mask.len(), v.len())));
        }
        let cols = v.cols();
        let mut value = Matrix::zeros(v.rows(), cols);
        for r in 0..v.rows() {
            let m = &mask[r * cols..(r + 1) * cols];
            let row = v.row(r);
            let top = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if top == f64::NEG_INFINITY {
                return Err(FgrrError::Precondition(format!("row {r} has an empty neighbourhood")));
            }
            let mut total = 0.0;
            for c in 0..cols {
                if m[c] {
                    let e = (row[c] - top).exp();
                    value.set(r, c, e);
                    total += e;
                }
            }
            for x in value.row_mut(r) {
                *x /= total;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::MaskedSoftmax(a, mask.to_vec()), rg))
    }

    /// Mean cross-entropy of row-wise softmax against 0-based class indices.
    /// Zero rows give a loss of exactly 0.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if labels.len() != v.rows() {
            return Err(FgrrError::Shape(format!("{} labels for {} rows", labels.len(), v.rows())));
        }
        let mut probs = Matrix::zeros(v.rows(), v.cols());
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= v.cols() {
                return Err(FgrrError::LabelOutOfRange {
                    label,
                    classes: v.cols(),
                });
            }
            let row = v.row(r);
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_total = row.iter().map(|x| (x - top).exp()).sum::<f64>().ln() + top;
            loss += log_total - row[label];
            for (p, x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - log_total).exp();
            }
        }
        let n = labels.len();
        let value = Matrix::scalar(if n == 0 { 0.0 } else { loss / n as f64 });
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Weighted sum of binary cross-entropies on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let v = self.value(logits);
        if targets.len() != v.len() || weights.len() != v.len() {
            return Err(FgrrError::Shape("bce targets/weights must match logits".into()));
        }
        let loss: f64 = v
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&x, &t), &w)| w * (softplus(x) - x * t))
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise smooth-L1 with unit transition point.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 });
        let rg = self.rg(a);
        self.push(value, Op::SmoothL1(a), rg)
    }

    /// Unfold a `[H*W, C]` map into `[H'*W', k*k*C]` patches.
    pub fn im2col(&mut self, input: Var, geom: ConvGeometry) -> Result<Var> {
        let v = self.value(input);
        if v.rows() != geom.height * geom.width || v.cols() != geom.channels {
            return Err(FgrrError::Shape(format!(
                "im2col expects {}x{}, got {}x{}",
                geom.height * geom.width,
                geom.channels,
                v.rows(),
                v.cols()
            )));
        }
        let c = geom.channels;
        let mut value = Matrix::zeros(geom.out_height() * geom.out_width(), geom.patch_len());
        geom.for_each_tap(|out_row, tap, src| {
            if let Some(s) = src {
                value.row_mut(out_row)[tap * c..(tap + 1) * c].copy_from_slice(v.row(s));
            }
        });
        let rg = self.rg(input);
        Ok(self.push(value, Op::Im2Col(input, geom), rg))
    }

    /// Average-pool groups of input rows. `regions` lists `n * bins` groups;
    /// output row `p` concatenates the means of groups `p*bins .. (p+1)*bins`.
    pub fn region_pool(&mut self, input: Var, regions: Vec<Vec<usize>>, bins: usize) -> Result<Var> {
        let v = self.value(input);
        if bins == 0 || regions.len() % bins != 0 {
            return Err(FgrrError::Shape("region count must be a multiple of bins".into()));
        }
        if regions.iter().any(|r| r.is_empty() || r.iter().any(|&i| i >= v.rows())) {
            return Err(FgrrError::Shape("empty or out-of-range pooling region".into()));
        }
        let c = v.cols();
        let n = regions.len() / bins;
        let mut value = Matrix::zeros(n, bins * c);
        for (g, cells) in regions.iter().enumerate() {
            let (p, b) = (g / bins, g % bins);
            let out = &mut value.row_mut(p)[b * c..(b + 1) * c];
            for &cell in cells {
                for (o, x) in out.iter_mut().zip(v.row(cell)) {
                    *o += x;
                }
            }
            let k = cells.len() as f64;
            for o in out.iter_mut() {
                *o /= k;
            }
        }
        let rg = self.rg(input);
        Ok(self.push(value, Op::RegionPool { input, regions, bins }, rg))
    }

    /// Identity forward; multiplies the incoming gradient by `-coeff`.
    pub fn grad_reverse(&mut self, a: Var, coeff: f64) -> Var {
        let value = self.value(a).clone();
        let rg = self.rg(a);
        self.push(value, Op::GradReverse(a, coeff), rg)
    }

    /// Gradients of `loss` (seeded with ones) with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = self.value(loss);
        grads[loss.0] = Some(Matrix::filled(seed.rows(), seed.cols(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::OuterAdd(col, row) => {
                let dc: Vec<f64> = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                let mut dr = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (o, x) in dr.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *col, Matrix::column_vector(&dc));
                self.accumulate(grads, *row, Matrix::row_vector(&dr));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gx, x| if x > 0.0 { gx } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let d = g.zip_map(self.value(*a), |gx, x| if x > 0.0 { gx } else { gx * slope });
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(out, |gx, y| gx * y * (1.0 - y))),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |gx, y| gx * y)),
            Op::LnClamped(a, lo, hi) => {
                let d = g.zip_map(self.value(*a), |gx, x| if x > *lo && x < *hi { gx / x } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.rg(p) {
                        let slice = g.data()[offset * g.cols()..(offset + rows) * g.cols()].to_vec();
                        self.accumulate(grads, p, Matrix::from_vec(rows, g.cols(), slice).expect("slice shape"));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += cols;
                }
            }
            Op::GatherRows(a, rows) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for (o, &r) in rows.iter().enumerate() {
                    for (x, y) in d.row_mut(r).iter_mut().zip(g.row(o)) {
                        *x += y;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ScatterAddRows(base, src, rows) => {
                self.accumulate(grads, *base, g.clone());
                if self.rg(*src) {
                    let mut d = Matrix::zeros(rows.len(), g.cols());
                    for (n, &r) in rows.iter().enumerate() {
                        d.row_mut(n).copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::Sum(a) => {
                let v = self.value(*a);
                self.accumulate(grads, *a, Matrix::filled(v.rows(), v.cols(), g.item()));
            }
            Op::Mean(a) => {
                let v = self.value(*a);
                if !v.is_empty() {
                    let each = g.item() / v.len() as f64;
                    self.accumulate(grads, *a, Matrix::filled(v.rows(), v.cols(), each));
                }
            }
            Op::MeanRows(a) => {
                let v = self.value(*a);
                let n = v.rows() as f64;
                let mut d = Matrix::zeros(v.rows(), v.cols());
                for r in 0..v.rows() {
                    for (x, y) in d.row_mut(r).iter_mut().zip(g.row(0)) {
                        *x = y / n;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowNorms(a) => {
                let v = self.value(*a);
                let mut d = Matrix::zeros(v.rows(), v.cols());
                for r in 0..v.rows() {
                    let norm = out.get(r, 0);
                    if norm > 0.0 {
                        let scale = g.get(r, 0) / norm;
                        for (x, y) in d.row_mut(r).iter_mut().zip(v.row(r)) {
                            *x = scale * y;
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SymNormalize(a) => {
                let src = self.value(*a);
                let n = src.rows();
                let degree: Vec<f64> = (0..n).map(|i| 1.0 + src.row(i).iter().sum::<f64>()).collect();
                let mut d_degree = vec![0.0; n];
                for k in 0..n {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += g.get(k, j) * out.get(k, j) + g.get(j, k) * out.get(j, k);
                    }
                    d_degree[k] = -s / (2.0 * degree[k]);
                }
                let mut d = Matrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        let direct = g.get(i, j) / (degree[i].sqrt() * degree[j].sqrt());
                        d.set(i, j, direct + d_degree[i]);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MaskedSoftmax(a, mask) => {
                let cols = out.cols();
                let mut d = Matrix::zeros(out.rows(), cols);
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        if mask[r * cols + c] {
                            d.set(r, c, y[c] * (gr[c] - dot));
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                if n > 0 {
                    let scale = g.item() / n as f64;
                    let mut d = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        let cur = d.get(r, label);
                        d.set(r, label, cur - 1.0);
                    }
                    self.accumulate(grads, *logits, d.map(|x| x * scale));
                }
            }
            Op::BceWithLogits { logits, targets, weights } => {
                let v = self.value(*logits);
                let s = g.item();
                let data: Vec<f64> = v
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&x, &t), &w)| s * w * (sigmoid(x) - t))
                    .collect();
                self.accumulate(grads, *logits, Matrix::from_vec(v.rows(), v.cols(), data).expect("bce shape"));
            }
            Op::SmoothL1(a) => {
                let d = g.zip_map(self.value(*a), |gx, x| if x.abs() < 1.0 { gx * x } else { gx * x.signum() });
                self.accumulate(grads, *a, d);
            }
            Op::Im2Col(input, geom) => {
                let c = geom.channels;
                let mut d = Matrix::zeros(geom.height * geom.width, c);
                geom.for_each_tap(|out_row, tap, src| {
                    if let Some(s) = src {
                        let from = &g.row(out_row)[tap * c..(tap + 1) * c];
                        for (x, y) in d.row_mut(s).iter_mut().zip(from) {
                            *x += y;
                        }
                    }
                });
                self.accumulate(grads, *input, d);
            }
            Op::RegionPool { input, regions, bins } => {
                let src = self.value(*input);
                let c = src.cols();
                let mut d = Matrix::zeros(src.rows(), c);
                for (gi, cells) in regions.iter().enumerate() {
                    let (p, b) = (gi / bins, gi % bins);
                    let from = &g.row(p)[b * c..(b + 1) * c];
                    let k = cells.len() as f64;
                    for &cell in cells {
                        for (x, y) in d.row_mut(cell).iter_mut().zip(from) {
                            *x += y / k;
                        }
                    }
                }
                self.accumulate(grads, *input, d);
            }
            Op::GradReverse(a, coeff) => self.accumulate(grads, *a, g.map(|x| -coeff * x)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fgrr_oracle::{compare_gradients, finite_difference_gradients};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Checks d(build(x))/dx against central differences, where `build` maps a
    /// parameter leaf to a scalar.
    fn check(x: Matrix, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let p = g.param(x.clone());
        let loss = build(&mut g, p);
        let analytic = g.backward(loss).get_or_zeros(p, &x);
        let numeric = finite_difference_gradients(
            |flat| {
                let mut g = Graph::new();
                let p = g.param(Matrix::from_vec(x.rows(), x.cols(), flat.to_vec()).unwrap());
                let l = build(&mut g, p);
                g.scalar(l)
            },
            x.data(),
        )
        .unwrap();
        let report = compare_gradients(analytic.data(), &numeric).unwrap();
        assert!(report.passes(1e-4), "{report:?}\nanalytic {:?}\nnumeric {:?}", analytic.data(), numeric);
    }

    /// Random projection to a scalar so every output entry gets a distinct weight.
    fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
        let shape = g.value(v).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(random(&mut rng, shape.0, shape.1));
        let m = g.mul(v, w).unwrap();
        g.sum(m)
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 4);
        check(x.clone(), |g, p| {
            let s = g.sigmoid(p);
            project(g, s, 2)
        });
        check(x.clone(), |g, p| {
            let s = g.exp(p);
            project(g, s, 3)
        });
        check(x.clone(), |g, p| {
            let s = g.leaky_relu(p, 0.2);
            project(g, s, 4)
        });
        check(x.clone(), |g, p| {
            let s = g.relu(p);
            project(g, s, 5)
        });
        check(x.map(|v| v * 3.0), |g, p| {
            let s = g.smooth_l1(p);
            project(g, s, 6)
        });
        check(x.map(|v| v.abs() * 0.9 + 0.05), |g, p| {
            let s = g.ln_clamped(p, 1e-7, 1.0 - 1e-7);
            project(g, s, 7)
        });
        check(x, |g, p| {
            let t = g.scale(p, 2.0);
            let u = g.add_scalar(t, 1.0);
            project(g, u, 8)
        });
    }

    #[test]
    fn grad_reverse_negates_and_scales() {
        let mut g = Graph::new();
        let p = g.param(Matrix::row_vector(&[1.0, -2.0]));
        let r = g.grad_reverse(p, 0.7);
        assert_eq!(g.value(r), g.value(p));
        let w = g.constant(Matrix::row_vector(&[3.0, 5.0]));
        let m = g.mul(r, w).unwrap();
        let l = g.sum(m);
        let grads = g.backward(l);
        let d = grads.get(p).unwrap();
        assert!((d.get(0, 0) + 2.1).abs() < 1e-15);
        assert!((d.get(0, 1) + 3.5).abs() < 1e-15);
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&mut rng, 4, 3);
        let other = random(&mut rng, 3, 5);
        check(x.clone(), move |g, p| {
            let o = g.constant(other.clone());
            let m = g.matmul(p, o).unwrap();
            project(g, m, 11)
        });
        let left = random(&mut rng, 2, 4);
        check(x.clone(), move |g, p| {
            let l = g.constant(left.clone());
            let m = g.matmul(l, p).unwrap();
            project(g, m, 12)
        });
        check(x.clone(), |g, p| {
            let t = g.transpose(p);
            let rows = g.gather_rows(t, &[2, 0, 2]).unwrap();
            let c = g.concat_rows(&[rows, t]).unwrap();
            let d = g.concat_cols(&[c, c]).unwrap();
            project(g, d, 13)
        });
        check(x.clone(), |g, p| {
            let base = g.scale(p, 0.5);
            let src = g.gather_rows(p, &[0, 1]).unwrap();
            let s = g.scatter_add_rows(base, src, &[3, 3]).unwrap();
            let m = g.mean_rows(s).unwrap();
            project(g, m, 14)
        });
        check(x.clone(), |g, p| {
            let n = g.row_norms(p);
            project(g, n, 15)
        });
        check(x.clone(), |g, p| {
            let bias = g.gather_rows(p, &[1]).unwrap();
            let s = g.add_row(p, bias).unwrap();
            let m = g.mean(s);
            let e = g.exp(m);
            g.sum(e)
        });
        check(x, |g, p| {
            let col = g.gather_rows(p, &[0, 1, 2, 3]).unwrap();
            let col = g.row_norms(col);
            let row = g.gather_rows(p, &[2]).unwrap();
            let o = g.outer_add(col, row).unwrap();
            project(g, o, 16)
        });
    }

    #[test]
    fn normalization_and_softmax_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let a = random(&mut rng, 5, 5).map(|v| v.abs());
        check(a.clone(), |g, p| {
            let n = g.sym_normalize(p).unwrap();
            project(g, n, 21)
        });
        let mask: Vec<bool> = (0..25).map(|i| i % 3 != 1).collect();
        check(a.clone(), move |g, p| {
            let s = g.masked_softmax(p, &mask).unwrap();
            project(g, s, 22)
        });
        check(a.clone(), |g, p| g.softmax_cross_entropy(p, &[0, 4, 2, 2, 1]).unwrap());
        let targets = vec![1.0, 0.0, 1.0, 0.0, 0.0];
        let weights = vec![0.5, 1.0, 2.0, 0.0, 1.0];
        check(a.map(|v| v * 4.0 - 2.0), move |g, p| {
            let row = g.gather_rows(p, &[1]).unwrap();
            g.bce_with_logits(row, &targets, &weights).unwrap()
        });
    }

    #[test]
    fn convolution_and_pooling_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let geom = ConvGeometry {
            height: 5,
            width: 4,
            channels: 2,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        assert_eq!((geom.out_height(), geom.out_width()), (3, 2));
        let x = random(&mut rng, 20, 2);
        check(x.clone(), move |g, p| {
            let cols = g.im2col(p, geom).unwrap();
            project(g, cols, 31)
        });
        check(x, |g, p| {
            let pooled = g.region_pool(p, vec![vec![0, 1, 5], vec![19], vec![3, 4], vec![3]], 2).unwrap();
            project(g, pooled, 32)
        });
    }

    #[test]
    fn im2col_places_taps() {
        // 2x2 single-channel map, 3x3 kernel, padding 1, stride 1
        let geom = ConvGeometry {
            height: 2,
            width: 2,
            channels: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let cols = g.im2col(x, geom).unwrap();
        let v = g.value(cols);
        assert_eq!(v.shape(), (4, 9));
        assert_eq!(v.row(0), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
        assert_eq!(v.row(3), &[1.0, 2.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Matrix::scalar(2.0));
        let p = g.param(Matrix::scalar(3.0));
        let m = g.mul(c, p).unwrap();
        let grads = g.backward(m);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }

    #[test]
    fn empty_cross_entropy_is_zero() {
        let mut g = Graph::new();
        let p = g.param(Matrix::zeros(0, 3));
        let l = g.softmax_cross_entropy(p, &[]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        assert!(g.softmax_cross_entropy(p, &[1]).is_err());
    }

    #[test]
    fn masked_softmax_rejects_empty_rows() {
        let mut g = Graph::new();
        let p = g.param(Matrix::zeros(2, 2));
        assert!(g.masked_softmax(p, &[true, false, false, false]).is_err());
    }
}

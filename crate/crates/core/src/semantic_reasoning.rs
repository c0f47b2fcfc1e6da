//! Semantic-level reasoning over ROI instance features.
//!
//! Confident target proposals are pseudo-labelled class by class. Source and
//! target instances are joined by a hubness-corrected similarity graph and
//! convolved together; class prototypes of the reasoned features are pulled
//! together across domains and pushed apart across classes. Within a domain,
//! instances that overlap in space and agree in appearance attend to each
//! other.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{FgrrError, Result};
use crate::geometry::{center_distance, cosine_similarity, iou, BBox};
use crate::graph::{
    attention_layer, augment_adjacency, gcn_layers, graph_attention, neighbourhood_mask, GatParams, GcnParams,
};
use crate::pixel_correspondence::Domain;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticConfig {
    /// Fraction of each class's target proposals kept as pseudo-labels.
    pub keep_fraction: f64,
    /// Minimum class probability for a pseudo-label.
    pub min_score: f64,
    /// Neighbourhood size of the hubness correction.
    pub k_nn: usize,
    /// Margin of the cross-class push term.
    pub xi: f64,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            keep_fraction: 0.2,
            min_score: 0.8,
            k_nn: 10,
            xi: 1.0,
        }
    }
}

impl SemanticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(FgrrError::Config(format!("keep_fraction {} not in (0, 1]", self.keep_fraction)));
        }
        if self.k_nn == 0 || !(self.xi > 0.0) || !self.min_score.is_finite() {
            return Err(FgrrError::Config("k_nn must be positive, xi > 0, min_score finite".into()));
        }
        Ok(())
    }
}

/// Candidate boxes with instance features and classifier probabilities.
///
/// `scores` has `K + 1` columns with background first, so each row is a
/// full distribution. `labels` are class ids in `1..=K` (0 for unlabelled).
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    pub features: Matrix,
    pub scores: Option<Matrix>,
    pub labels: Vec<usize>,
    pub domain: Domain,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn subset(&self, keep: &[usize]) -> Self {
        let mut features = Matrix::zeros(keep.len(), self.features.cols());
        for (o, &i) in keep.iter().enumerate() {
            features.row_mut(o).copy_from_slice(self.features.row(i));
        }
        let scores = self.scores.as_ref().map(|s| {
            let mut out = Matrix::zeros(keep.len(), s.cols());
            for (o, &i) in keep.iter().enumerate() {
                out.row_mut(o).copy_from_slice(s.row(i));
            }
            out
        });
        Self {
            boxes: keep.iter().map(|&i| self.boxes[i]).collect(),
            features,
            scores,
            labels: keep.iter().map(|&i| self.labels.get(i).copied().unwrap_or(0)).collect(),
            domain: self.domain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrrParams<T = Matrix> {
    pub gcn: GcnParams<T>,
    pub gat: GatParams<T>,
}

impl<T> SrrParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SrrParams<U> {
        SrrParams {
            gcn: self.gcn.map(f),
            gat: self.gat.map(f),
        }
    }

    pub fn tensors(&self) -> Vec<&T> {
        let mut v = self.gcn.tensors();
        v.extend(self.gat.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut v = self.gcn.tensors_mut();
        v.extend(self.gat.tensors_mut());
        v
    }
}

impl SrrParams {
    pub fn random(rng: &mut impl Rng, width: usize, gcn_layers: usize) -> Self {
        Self {
            gcn: GcnParams::random(rng, width, gcn_layers),
            gat: GatParams::random(rng, width, width),
        }
    }
}

/// `(row, pseudo-label)` of every kept proposal, in row order.
///
/// Each row is assigned its most probable foreground class (lowest class on
/// ties). Within a class, rows are ranked by that probability (lower row on
/// ties) and the first `ceil(keep_fraction * n_k)` rows scoring at least
/// `min_score` are kept.
pub fn pseudo_label_selection(scores: &Matrix, keep_fraction: f64, min_score: f64) -> Result<Vec<(usize, usize)>> {
    if scores.cols() < 2 {
        return Err(FgrrError::Shape("scores need a background and at least one class column".into()));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(FgrrError::Config(format!("keep_fraction {keep_fraction} not in (0, 1]")));
    }
    let mut per_class: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for r in 0..scores.rows() {
        let row = scores.row(r);
        let (mut k, mut best) = (1, row[1]);
        for (c, &v) in row.iter().enumerate().skip(2) {
            if v > best {
                k = c;
                best = v;
            }
        }
        per_class.entry(k).or_default().push((r, best));
    }
    let mut kept = Vec::new();
    for (k, mut rows) in per_class {
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let quota = (keep_fraction * rows.len() as f64).ceil() as usize;
        kept.extend(rows.into_iter().take(quota).filter(|&(_, s)| s >= min_score).map(|(r, _)| (r, k)));
    }
    kept.sort_unstable();
    Ok(kept)
}

pub fn select_pseudo_labeled_proposals(target: &ProposalSet, keep_fraction: f64, min_score: f64) -> Result<ProposalSet> {
    let scores = target
        .scores
        .as_ref()
        .ok_or_else(|| FgrrError::Precondition("pseudo-labelling needs classifier scores".into()))?;
    let kept = pseudo_label_selection(scores, keep_fraction, min_score)?;
    let rows: Vec<usize> = kept.iter().map(|&(r, _)| r).collect();
    let mut out = target.subset(&rows);
    out.labels = kept.iter().map(|&(_, k)| k).collect();
    Ok(out)
}

/// Hubness-corrected bipartite adjacency `[Ns, Nt]`:
/// `σ(2 cos(s, t) − r_T(s) − r_S(t))`, where `r_T(s)` averages the `k`
/// highest cosines from `s` to the targets (and `r_S` symmetrically), with
/// `k = min(k_nn, Ns, Nt)`.
pub fn cdsr_adjacency(vs: &Matrix, vt: &Matrix, k_nn: usize) -> Result<Matrix> {
    let (ns, nt) = (vs.rows(), vt.rows());
    if ns == 0 || nt == 0 {
        return Err(FgrrError::Precondition("similarity graph needs nodes on both sides".into()));
    }
    if vs.cols() != vt.cols() {
        return Err(FgrrError::Shape(format!("node widths {} and {}", vs.cols(), vt.cols())));
    }
    let k = k_nn.min(ns).min(nt).max(1);
    let mut cos = Matrix::zeros(ns, nt);
    for i in 0..ns {
        for j in 0..nt {
            cos.set(i, j, cosine_similarity(vs.row(i), vt.row(j)).value);
        }
    }
    let mean_top = |mut v: Vec<f64>| {
        v.sort_by(|a, b| b.total_cmp(a));
        v[..k].iter().sum::<f64>() / k as f64
    };
    let r_t: Vec<f64> = (0..ns).map(|i| mean_top(cos.row(i).to_vec())).collect();
    let r_s: Vec<f64> = (0..nt).map(|j| mean_top((0..ns).map(|i| cos.get(i, j)).collect())).collect();
    let mut out = Matrix::zeros(ns, nt);
    for i in 0..ns {
        for j in 0..nt {
            let z = 2.0 * cos.get(i, j) - r_t[i] - r_s[j];
            out.set(i, j, 1.0 / (1.0 + (-z).exp()));
        }
    }
    Ok(out)
}

/// Differentiable semantic GCN over `[vs; vt]` with a fixed cross-domain
/// edge matrix. Returns the reasoned `[Ns + Nt, d]` features.
pub fn semantic_bgcm(g: &mut Graph, vs: Var, vt: Var, edges: &Matrix, gcn: &GcnParams<Var>) -> Result<Var> {
    if edges.shape() != (g.value(vs).rows(), g.value(vt).rows()) {
        return Err(FgrrError::Shape(format!("edge matrix {:?} for the node sets", edges.shape())));
    }
    let e = g.constant(edges.clone());
    let a = augment_adjacency(g, e)?;
    let a_hat = g.sym_normalize(a)?;
    let x = g.concat_rows(&[vs, vt])?;
    gcn_layers(g, x, a_hat, &gcn.weights)
}

pub fn semantic_bgcm_forward(vs: &Matrix, vt: &Matrix, adjacency: &Matrix, gcn: &GcnParams) -> Result<Matrix> {
    let mut g = Graph::new();
    let a = g.constant(vs.clone());
    let b = g.constant(vt.clone());
    let w = gcn.map(&mut |m| g.constant(m.clone()));
    let out = semantic_bgcm(&mut g, a, b, adjacency, &w)?;
    Ok(g.value(out).clone())
}

/// Source and target class prototypes with the push margin.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    pub ps: BTreeMap<usize, Vec<f64>>,
    pub pt: BTreeMap<usize, Vec<f64>>,
    pub xi: f64,
}

fn class_groups(labels: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            return Err(FgrrError::LabelOutOfRange { label: 0, classes: 0 });
        }
        groups.entry(l).or_default().push(i);
    }
    Ok(groups)
}

/// Per-class means of the rows of `features`.
pub fn class_prototypes(features: &Matrix, labels: &[usize]) -> Result<BTreeMap<usize, Vec<f64>>> {
    if labels.len() != features.rows() {
        return Err(FgrrError::Shape(format!("{} labels for {} rows", labels.len(), features.rows())));
    }
    Ok(class_groups(labels)?
        .into_iter()
        .map(|(k, rows)| {
            let mut mean = vec![0.0; features.cols()];
            for &r in &rows {
                for (m, v) in mean.iter_mut().zip(features.row(r)) {
                    *m += v;
                }
            }
            (k, mean.into_iter().map(|m| m / rows.len() as f64).collect())
        })
        .collect())
}

/// Differentiable prototypes: `[classes present, d]` plus the class ids.
pub fn prototypes_var(g: &mut Graph, features: Var, labels: &[usize]) -> Result<(Var, Vec<usize>)> {
    if labels.len() != g.value(features).rows() {
        return Err(FgrrError::Shape("one label per node".into()));
    }
    let groups = class_groups(labels)?;
    let classes: Vec<usize> = groups.keys().copied().collect();
    let p = g.region_pool(features, groups.into_values().collect(), 1)?;
    Ok((p, classes))
}

/// Pull term over shared classes plus hinge push over ordered cross-class pairs.
pub fn cda_loss(table: &PrototypeTable) -> Result<f64> {
    let to_matrix = |m: &BTreeMap<usize, Vec<f64>>| -> Result<(Matrix, Vec<usize>)> {
        let rows: Vec<Vec<f64>> = m.values().cloned().collect();
        Ok((Matrix::from_rows(&rows)?, m.keys().copied().collect()))
    };
    if table.ps.is_empty() || table.pt.is_empty() {
        return Ok(0.0);
    }
    let (ps, cs) = to_matrix(&table.ps)?;
    let (pt, ct) = to_matrix(&table.pt)?;
    let mut g = Graph::new();
    let a = g.constant(ps);
    let b = g.constant(pt);
    let l = cda_from_prototypes(&mut g, a, &cs, b, &ct, table.xi)?;
    Ok(g.scalar(l))
}

/// [`cda_loss`] on prototype matrices whose rows belong to `cs` / `ct`.
pub fn cda_from_prototypes(g: &mut Graph, ps: Var, cs: &[usize], pt: Var, ct: &[usize], xi: f64) -> Result<Var> {
    let mut terms = Vec::new();
    let shared: Vec<(usize, usize)> = cs
        .iter()
        .enumerate()
        .filter_map(|(i, k)| ct.iter().position(|c| c == k).map(|j| (i, j)))
        .collect();
    if !shared.is_empty() {
        let (si, ti): (Vec<usize>, Vec<usize>) = shared.into_iter().unzip();
        let a = g.gather_rows(ps, &si)?;
        let b = g.gather_rows(pt, &ti)?;
        let d = g.sub(a, b)?;
        let n = g.row_norms(d);
        terms.push(g.sum(n));
    }
    let cross: Vec<(usize, usize)> = (0..cs.len())
        .flat_map(|i| (0..ct.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| cs[i] != ct[j])
        .collect();
    if !cross.is_empty() {
        let (si, ti): (Vec<usize>, Vec<usize>) = cross.into_iter().unzip();
        let a = g.gather_rows(ps, &si)?;
        let b = g.gather_rows(pt, &ti)?;
        let d = g.sub(a, b)?;
        let n = g.row_norms(d);
        let gap = g.scale(n, -1.0);
        let gap = g.add_scalar(gap, xi);
        let hinge = g.relu(gap);
        terms.push(g.sum(hinge));
    }
    match terms.len() {
        0 => Ok(g.constant(Matrix::scalar(0.0))),
        1 => Ok(terms[0]),
        _ => g.add(terms[0], terms[1]),
    }
}

/// CDA straight from reasoned node features of both domains.
pub fn cda_loss_var(g: &mut Graph, hs: Var, labels_s: &[usize], ht: Var, labels_t: &[usize], xi: f64) -> Result<Var> {
    if labels_s.is_empty() || labels_t.is_empty() {
        return Ok(g.constant(Matrix::scalar(0.0)));
    }
    let (ps, cs) = prototypes_var(g, hs, labels_s)?;
    let (pt, ct) = prototypes_var(g, ht, labels_t)?;
    cda_from_prototypes(g, ps, &cs, pt, &ct, xi)
}

/// Spatial-and-semantic adjacency with unit diagonal. Pairs are spatially
/// linked when their centres are closer than half the image diagonal or
/// their IoU exceeds 0.5, and semantically linked when their feature cosine
/// exceeds 0.5; an edge needs both.
pub fn intra_semantic_adjacency(props: &ProposalSet, image_diagonal: f64) -> Result<Matrix> {
    let n = props.len();
    if props.features.rows() != n {
        return Err(FgrrError::Shape("one feature row per box".into()));
    }
    let mut a = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (bi, bj) = (&props.boxes[i], &props.boxes[j]);
            let spatial = center_distance(bi, bj, image_diagonal)? < 0.5 || iou(bi, bj) > 0.5;
            let semantic = cosine_similarity(props.features.row(i), props.features.row(j)).value > 0.5;
            if spatial && semantic {
                a.set(i, j, 1.0);
            }
        }
    }
    Ok(a)
}

/// Differentiable intra-domain attention with neighbourhoods from `adjacency`.
pub fn semantic_gam(g: &mut Graph, x: Var, adjacency: &Matrix, gat: &GatParams<Var>) -> Result<Var> {
    let mask = neighbourhood_mask(adjacency)?;
    Ok(attention_layer(g, x, &mask, gat.w, gat.a)?.0)
}

pub fn semantic_gam_forward(x: &Matrix, adjacency: &Matrix, gat: &GatParams) -> Result<Matrix> {
    Ok(graph_attention(x, adjacency, gat)?.0)
}

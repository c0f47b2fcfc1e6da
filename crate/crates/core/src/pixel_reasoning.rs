//! Pixel-level relational reasoning over matched foreground pixels.
//!
//! Source and pseudo-labelled target pixels form a bipartite graph whose
//! edges are scored by a learnable map. A GCN runs on the augmented graph,
//! attention then runs within each domain, and a linear classifier predicts
//! node classes. Reasoned features are added back onto the shallow map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{FgrrError, Result};
use crate::geometry::FeatureMap;
use crate::graph::{
    attention_layer, augment_adjacency, augment_bipartite, edge_matrix, gcn_layers, AugmentedGraph,
    EdgeScorerParams, GatParams, GcnParams,
};
use crate::nn::{linear, LinearParams};
use crate::pixel_correspondence::{MatchedPairs, PixelSet};
use crate::tensor::Matrix;

/// Trainable parameters of the pixel path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrrParams<T = Matrix> {
    pub edge: EdgeScorerParams<T>,
    pub gcn: GcnParams<T>,
    pub gat_s: GatParams<T>,
    pub gat_t: GatParams<T>,
    pub classifier: LinearParams<T>,
}

impl<T> PrrParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> PrrParams<U> {
        PrrParams {
            edge: self.edge.map(f),
            gcn: self.gcn.map(f),
            gat_s: self.gat_s.map(f),
            gat_t: self.gat_t.map(f),
            classifier: self.classifier.map(f),
        }
    }

    pub fn tensors(&self) -> Vec<&T> {
        let mut v = self.edge.tensors();
        v.extend(self.gcn.tensors());
        v.extend(self.gat_s.tensors());
        v.extend(self.gat_t.tensors());
        v.extend(self.classifier.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut v = self.edge.tensors_mut();
        v.extend(self.gcn.tensors_mut());
        v.extend(self.gat_s.tensors_mut());
        v.extend(self.gat_t.tensors_mut());
        v.extend(self.classifier.tensors_mut());
        v
    }
}

impl PrrParams {
    pub fn random(rng: &mut impl Rng, channels: usize, classes: usize, gcn_layers: usize) -> Self {
        Self {
            edge: EdgeScorerParams::random(rng, channels),
            gcn: GcnParams::random(rng, channels, gcn_layers),
            gat_s: GatParams::random(rng, channels, channels),
            gat_t: GatParams::random(rng, channels, channels),
            classifier: LinearParams::glorot(rng, channels, classes),
        }
    }

    /// Identity GCN and attention weights with a zero edge scorer.
    pub fn identity(channels: usize, classes: usize, gcn_layers: usize) -> Self {
        Self {
            edge: EdgeScorerParams::zeros(channels),
            gcn: GcnParams::identity(channels, gcn_layers),
            gat_s: GatParams::identity(channels),
            gat_t: GatParams::identity(channels),
            classifier: LinearParams {
                w: Matrix::zeros(channels, classes),
                b: Matrix::zeros(1, classes),
            },
        }
    }
}

/// Inter-domain bipartite graph plus the two intra-domain attention graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGraphBundle {
    pub source: PixelSet,
    pub target: PixelSet,
    pub inter: AugmentedGraph,
    pub intra_s: Matrix,
    pub intra_t: Matrix,
    /// Source ground-truth labels followed by target pseudo-labels.
    pub node_labels: Vec<usize>,
}

impl PixelGraphBundle {
    pub fn is_empty(&self) -> bool {
        self.source.is_empty() || self.target.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.inter.node_count()
    }
}

/// Build the pixel graphs. Either domain without nodes gives an empty bundle.
pub fn build_pixel_graphs(
    src: &PixelSet,
    tgt: &PixelSet,
    pairs: &MatchedPairs,
    edge: &EdgeScorerParams,
) -> Result<PixelGraphBundle> {
    if pairs.len() != tgt.len() {
        return Err(FgrrError::Precondition(format!(
            "{} pairs for {} target pixels",
            pairs.len(),
            tgt.len()
        )));
    }
    for (p, r) in pairs.pairs.iter().zip(&tgt.refs) {
        if p.source >= src.len() || r.label != Some(p.class) {
            return Err(FgrrError::Precondition("pairs do not describe this pixel set".into()));
        }
    }
    let c = edge.channels();
    let empty = |set: &PixelSet| set.is_empty();
    let e = if empty(src) || empty(tgt) {
        Matrix::zeros(src.len(), tgt.len())
    } else {
        let mut g = Graph::new();
        let vs = g.constant(src.features.clone());
        let vt = g.constant(tgt.features.clone());
        let theta = g.constant(edge.theta.clone());
        let e = edge_matrix(&mut g, vs, vt, theta)?;
        g.value(e).clone()
    };
    let vs = if src.is_empty() { Matrix::zeros(0, c) } else { src.features.clone() };
    let vt = if tgt.is_empty() { Matrix::zeros(0, c) } else { tgt.features.clone() };
    let inter = augment_bipartite(&vs, &vt, &e)?;
    let mut node_labels = src.labels();
    node_labels.extend(tgt.labels());
    Ok(PixelGraphBundle {
        source: src.clone(),
        target: tgt.clone(),
        inter,
        intra_s: Matrix::filled(src.len(), src.len(), 1.0),
        intra_t: Matrix::filled(tgt.len(), tgt.len(), 1.0),
        node_labels,
    })
}

/// GCN over the augmented graph, attention within each domain, then the
/// classifier. `x` stacks `ns` source rows over the target rows.
/// Returns `(reasoned, logits)`.
pub fn reasoning_layers(g: &mut Graph, x: Var, adjacency: Var, ns: usize, p: &PrrParams<Var>) -> Result<(Var, Var)> {
    let n = g.value(x).rows();
    if ns == 0 || ns >= n {
        return Err(FgrrError::EmptyBundle);
    }
    let a_hat = g.sym_normalize(adjacency)?;
    let h = gcn_layers(g, x, a_hat, &p.gcn.weights)?;
    let src_rows: Vec<usize> = (0..ns).collect();
    let tgt_rows: Vec<usize> = (ns..n).collect();
    let hs = g.gather_rows(h, &src_rows)?;
    let ht = g.gather_rows(h, &tgt_rows)?;
    let (os, _) = attention_layer(g, hs, &vec![true; ns * ns], p.gat_s.w, p.gat_s.a)?;
    let nt = n - ns;
    let (ot, _) = attention_layer(g, ht, &vec![true; nt * nt], p.gat_t.w, p.gat_t.a)?;
    let reasoned = g.concat_rows(&[os, ot])?;
    let logits = linear(g, reasoned, &p.classifier)?;
    Ok((reasoned, logits))
}

/// Full differentiable pixel path from node features of both domains; edges
/// are rescored on every call so the scorer receives gradients.
pub fn pixel_graph_forward(g: &mut Graph, xs: Var, xt: Var, p: &PrrParams<Var>) -> Result<(Var, Var)> {
    let ns = g.value(xs).rows();
    if ns == 0 || g.value(xt).rows() == 0 {
        return Err(FgrrError::EmptyBundle);
    }
    let e = edge_matrix(g, xs, xt, p.edge.theta)?;
    let adjacency = augment_adjacency(g, e)?;
    let x = g.concat_rows(&[xs, xt])?;
    reasoning_layers(g, x, adjacency, ns, p)
}

/// Plain forward over a built bundle: `(reasoned features, logits)`.
pub fn pixel_reasoning_forward(bundle: &PixelGraphBundle, p: &PrrParams) -> Result<(Matrix, Matrix)> {
    if bundle.is_empty() {
        return Err(FgrrError::EmptyBundle);
    }
    let mut g = Graph::new();
    let vars = p.map(&mut |m| g.constant(m.clone()));
    let x = g.constant(bundle.inter.nodes.clone());
    let a = g.constant(bundle.inter.adjacency.clone());
    let (reasoned, logits) = reasoning_layers(&mut g, x, a, bundle.source.len(), &vars)?;
    Ok((g.value(reasoned).clone(), g.value(logits).clone()))
}

fn zero_based(labels: &[usize], classes: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            if l == 0 || l > classes {
                Err(FgrrError::LabelOutOfRange { label: l, classes })
            } else {
                Ok(l - 1)
            }
        })
        .collect()
}

/// Mean cross-entropy over nodes with labels in `1..=K`; no nodes gives 0.
pub fn node_classification_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = g.value(logits).cols();
    let idx = zero_based(labels, classes)?;
    g.softmax_cross_entropy(logits, &idx)
}

pub fn node_classification_loss_value(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = node_classification_loss(&mut g, l, labels)?;
    Ok(g.scalar(loss))
}

/// Residual fusion: adds `reasoned[n]` at the pixel of `pixels.refs[n]`.
pub fn fuse_back(fm: &FeatureMap, pixels: &PixelSet, reasoned: &Matrix) -> Result<FeatureMap> {
    if reasoned.rows() != pixels.len() || (!pixels.is_empty() && reasoned.cols() != fm.channels()) {
        return Err(FgrrError::Shape(format!(
            "{:?} reasoned features for {} pixels of {} channels",
            reasoned.shape(),
            pixels.len(),
            fm.channels()
        )));
    }
    if pixels.refs.iter().any(|r| r.y >= fm.height() || r.x >= fm.width()) {
        return Err(FgrrError::Precondition("pixel outside feature map".into()));
    }
    let mut out = fm.pixels().clone();
    for (n, r) in pixels.refs.iter().enumerate() {
        let row = out.row_mut(fm.index(r.y, r.x));
        for (o, v) in row.iter_mut().zip(reasoned.row(n)) {
            *o += v;
        }
    }
    FeatureMap::from_pixels(fm.stage, fm.height(), fm.width(), out)
}

/// Differentiable [`fuse_back`] on a `[H*W, C]` map at linear pixel indices.
pub fn fuse_back_var(g: &mut Graph, map: Var, pixels: &[usize], reasoned: Var) -> Result<Var> {
    g.scatter_add_rows(map, reasoned, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PixelRef, Stage};
    use crate::gradcheck::{check_suite, random_matrix};
    use crate::graph::{edge_weight, normalize_adjacency};
    use crate::pixel_correspondence::{Domain, MatchedPair};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pixel_set(rng: &mut impl Rng, n: usize, c: usize, domain: Domain, classes: usize) -> PixelSet {
        PixelSet {
            refs: (0..n)
                .map(|i| PixelRef {
                    y: i / 4,
                    x: i % 4,
                    label: Some(rng.gen_range(1..=classes)),
                })
                .collect(),
            features: random_matrix(rng, n, c),
            domain,
        }
    }

    fn pairs_for(tgt: &PixelSet) -> MatchedPairs {
        MatchedPairs {
            pairs: tgt
                .refs
                .iter()
                .map(|r| MatchedPair {
                    source: 0,
                    target: r.y * 4 + r.x,
                    class: r.label.unwrap(),
                })
                .collect(),
        }
    }

    #[test]
    fn empty_target_gives_empty_bundle_and_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = pixel_set(&mut rng, 3, 4, Domain::Source, 2);
        let tgt = PixelSet::empty(Domain::Target, 4);
        let b = build_pixel_graphs(&src, &tgt, &MatchedPairs::default(), &EdgeScorerParams::zeros(4)).unwrap();
        assert!(b.is_empty());
        assert!(pixel_reasoning_forward(&b, &PrrParams::identity(4, 2, 2)).is_err());
        assert_eq!(node_classification_loss_value(&Matrix::zeros(0, 4), &[]).unwrap(), 0.0);
    }

    #[test]
    fn two_node_bundle_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = pixel_set(&mut rng, 1, 3, Domain::Source, 3);
        let tgt = pixel_set(&mut rng, 1, 3, Domain::Target, 3);
        let edge = EdgeScorerParams::random(&mut rng, 3);
        let b = build_pixel_graphs(&src, &tgt, &pairs_for(&tgt), &edge).unwrap();
        let w = edge_weight(src.features.row(0), tgt.features.row(0), &edge).unwrap();
        assert_eq!(b.inter.adjacency.to_rows(), vec![vec![0.0, w], vec![w, 0.0]]);
        assert_eq!(b.node_labels, vec![src.refs[0].label.unwrap(), tgt.refs[0].label.unwrap()]);
    }

    #[test]
    fn inter_adjacency_matches_recomputed_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = pixel_set(&mut rng, 5, 4, Domain::Source, 3);
        let tgt = pixel_set(&mut rng, 7, 4, Domain::Target, 3);
        let edge = EdgeScorerParams::random(&mut rng, 4);
        let b = build_pixel_graphs(&src, &tgt, &pairs_for(&tgt), &edge).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                let slow = fgrr_oracle::formulas::edge_weight(src.features.row(i), tgt.features.row(j), edge.theta.data());
                assert!((b.inter.adjacency.get(i, 5 + j) - slow).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inconsistent_pairs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = pixel_set(&mut rng, 2, 2, Domain::Source, 2);
        let tgt = pixel_set(&mut rng, 2, 2, Domain::Target, 2);
        let mut pairs = pairs_for(&tgt);
        pairs.pairs.pop();
        assert!(build_pixel_graphs(&src, &tgt, &pairs, &EdgeScorerParams::zeros(2)).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (ns, nt) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let src = pixel_set(&mut rng, ns, 4, Domain::Source, 3);
            let tgt = pixel_set(&mut rng, nt, 4, Domain::Target, 3);
            let p = PrrParams::random(&mut rng, 4, 3, 2);
            let b = build_pixel_graphs(&src, &tgt, &pairs_for(&tgt), &p.edge).unwrap();
            let (_, logits) = pixel_reasoning_forward(&b, &p).unwrap();
            for r in 0..logits.rows() {
                let top = logits.row(r).iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.row(r).iter().map(|v| (v - top).exp()).sum();
                let total: f64 = logits.row(r).iter().map(|v| (v - top).exp() / z).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_parameters_on_two_nodes_match_hand_trace() {
        let src = PixelSet {
            refs: vec![PixelRef { y: 0, x: 0, label: Some(1) }],
            features: Matrix::row_vector(&[1.0, -2.0]),
            domain: Domain::Source,
        };
        let tgt = PixelSet {
            refs: vec![PixelRef { y: 0, x: 1, label: Some(2) }],
            features: Matrix::row_vector(&[0.5, 3.0]),
            domain: Domain::Target,
        };
        let mut p = PrrParams::identity(2, 2, 2);
        p.classifier.w = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        p.classifier.b = Matrix::row_vector(&[0.1, -0.1]);
        let b = build_pixel_graphs(&src, &tgt, &pairs_for(&tgt), &p.edge).unwrap();
        let (reasoned, logits) = pixel_reasoning_forward(&b, &p).unwrap();

        // zero scorer: e = 1/2, degrees 3/2, so Â = [[2/3, 1/3], [1/3, 2/3]]
        let a = [[2.0 / 3.0, 1.0 / 3.0], [1.0 / 3.0, 2.0 / 3.0]];
        let mut h: [[f64; 2]; 2] = [[1.0, -2.0], [0.5, 3.0]];
        for _ in 0..2 {
            let mut next = [[0.0; 2]; 2];
            for i in 0..2 {
                for c in 0..2 {
                    next[i][c] = (a[i][0] * h[0][c] + a[i][1] * h[1][c]).max(0.0);
                }
            }
            h = next;
        }
        for i in 0..2 {
            for c in 0..2 {
                assert!((reasoned.get(i, c) - h[i][c]).abs() < 1e-12);
            }
            let expect = [
                h[i][0] * 1.0 + h[i][1] * -1.0 + 0.1,
                h[i][0] * 2.0 + h[i][1] * 0.5 - 0.1,
            ];
            for k in 0..2 {
                assert!((logits.get(i, k) - expect[k]).abs() < 1e-12);
            }
        }
        assert!((normalize_adjacency(&b.inter.adjacency).unwrap().get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn node_loss_examples() {
        let uniform = Matrix::zeros(3, 4);
        let l = node_classification_loss_value(&uniform, &[1, 2, 4]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.38629436).abs() < 1e-8);
        let mut sharp = Matrix::zeros(2, 3);
        sharp.set(0, 1, 10.0);
        sharp.set(1, 2, 10.0);
        let l = node_classification_loss_value(&sharp, &[2, 3]).unwrap();
        assert!(l < 1e-3 && l > 0.0);
        assert!(matches!(
            node_classification_loss_value(&sharp, &[0, 1]),
            Err(FgrrError::LabelOutOfRange { .. })
        ));
        assert!(node_classification_loss_value(&sharp, &[4, 1]).is_err());
    }

    #[test]
    fn fuse_back_is_residual_and_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fm = FeatureMap::from_pixels(Stage::Shallow, 4, 4, random_matrix(&mut rng, 16, 3)).unwrap();
        let set = pixel_set(&mut rng, 5, 3, Domain::Source, 2);
        let same = fuse_back(&fm, &set, &Matrix::zeros(5, 3)).unwrap();
        assert_eq!(same, fm);

        let one = set.subset(&[2]);
        let out = fuse_back(&fm, &one, &Matrix::filled(1, 3, 1.0)).unwrap();
        let changed: Vec<usize> = (0..16).filter(|&p| out.pixels().row(p) != fm.pixels().row(p)).collect();
        assert_eq!(changed, vec![one.linear_indices(4)[0]]);

        let reasoned = random_matrix(&mut rng, 5, 3);
        let out = fuse_back(&fm, &set, &reasoned).unwrap();
        let selected = set.linear_indices(4);
        for p in 0..16 {
            if !selected.contains(&p) {
                let (a, b) = (out.pixels().row(p), fm.pixels().row(p));
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
        assert!(fuse_back(&fm, &set, &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn node_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        check_suite(20, |_| {
            let (ns, nt, c, k) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4), 3);
            let p = PrrParams::random(&mut rng, c, k, 2);
            let labels: Vec<usize> = (0..ns + nt).map(|_| rng.gen_range(1..=k)).collect();
            let mut inputs = vec![random_matrix(&mut rng, ns, c), random_matrix(&mut rng, nt, c)];
            inputs.extend(p.tensors().into_iter().cloned());
            (inputs, move |g: &mut Graph, v: &[Var]| {
                let mut it = v[2..].iter().copied();
                let vars = p.map(&mut |_| it.next().unwrap());
                let (_, logits) = pixel_graph_forward(g, v[0], v[1], &vars)?;
                node_classification_loss(g, logits, &labels)
            })
        });
    }

    #[test]
    fn node_loss_reaches_only_selected_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = PrrParams::random(&mut rng, 3, 2, 2);
        let src_map = random_matrix(&mut rng, 16, 3);
        let tgt_map = random_matrix(&mut rng, 16, 3);
        let (src_rows, tgt_rows) = (vec![1, 5, 6], vec![0, 9]);
        let mut g = Graph::new();
        let vars = p.map(&mut |m| g.param(m.clone()));
        let sm = g.param(src_map);
        let tm = g.param(tgt_map);
        let xs = g.gather_rows(sm, &src_rows).unwrap();
        let xt = g.gather_rows(tm, &tgt_rows).unwrap();
        let (_, logits) = pixel_graph_forward(&mut g, xs, xt, &vars).unwrap();
        let loss = node_classification_loss(&mut g, logits, &[1, 2, 1, 2, 2]).unwrap();
        let grads = g.backward(loss);
        for (map, rows) in [(sm, &src_rows), (tm, &tgt_rows)] {
            let gm = grads.get(map).unwrap();
            for r in 0..16 {
                let nonzero = gm.row(r).iter().any(|&v| v != 0.0);
                assert_eq!(nonzero, rows.contains(&r), "row {r}");
            }
        }
    }
}

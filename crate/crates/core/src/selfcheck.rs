//! Oracle battery run by `fgrr selfcheck` and the acceptance target.
//!
//! Each check compares the fast implementation with a slow reference or
//! with finite differences on seeded random instances and reports one line.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use fgrr_oracle::{dense_graph_reference, exhaustive_mutual_nn, formulas, DenseMode, OracleResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::detector::{
    anchors, backbone_deep, backbone_shallow, detection_loss, heads, image_input, objectness, roi_features, rpn_loss,
    DetectorConfig, DetectorParams,
};
use crate::error::{FgrrError, Result};
use crate::geometry::{centerness, BBox, FeatureMap, PixelRef, Stage};
use crate::gradcheck::{random_matrix, run_suite, SuiteOutcome};
use crate::graph::{
    attention_layer, augment_bipartite, edge_matrix, edge_weight, gcn_forward, gcn_layers, graph_attention,
    neighbourhood_mask, normalize_adjacency, EdgeScorerParams, GatParams, GcnParams, ATTENTION_SLOPE,
};
use crate::image_reweighting::{compute_w1, compute_w2, discriminate, ior_loss, ior_loss_var, DiscriminatorParams, IorWeights};
use crate::nn::LinearParams;
use crate::pixel_correspondence::{mutual_nn_match, Domain, PixelSet};
use crate::pixel_reasoning::{node_classification_loss, pixel_graph_forward, PrrParams};
use crate::scene::{DatasetSpec, Image, Shift};
use crate::semantic_reasoning::{
    cda_loss, cda_loss_var, cdsr_adjacency, intra_semantic_adjacency, semantic_bgcm, semantic_gam, PrototypeTable,
    ProposalSet,
};
use crate::tensor::Matrix;
use crate::training::{total_loss, train, LossBundle, Model, Module, Toggles, TrainConfig};

/// Absolute tolerance of closed-form comparisons.
pub const FORMULA_TOLERANCE: f64 = 1e-9;

/// Random instances per formula.
pub const FORMULA_INSTANCES: usize = 100;

/// Resolvable configurations per gradient suite.
pub const GRADIENT_CONFIGS: usize = 20;

/// Randomized cases of the graph invariant check.
pub const GRAPH_CASES: usize = 1000;

/// Randomized instances of the matching check.
pub const MATCHING_CASES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:<24} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

impl CheckOutcome {
    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self { name: name.into(), passed, detail },
            Err(e) => Self { name: name.into(), passed: false, detail: format!("error: {e}") },
        }
    }
}

/// Largest absolute deviation seen over a batch of comparisons.
#[derive(Default)]
struct Worst {
    count: usize,
    max_dev: f64,
}

impl Worst {
    fn see(&mut self, fast: f64, slow: f64) {
        self.count += 1;
        let dev = (fast - slow).abs();
        // NaN deviations must fail
        self.max_dev = if dev.is_nan() { f64::INFINITY } else { self.max_dev.max(dev) };
    }

    fn ok(&self) -> bool {
        self.max_dev <= FORMULA_TOLERANCE
    }
}

fn rand_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_box(rng: &mut impl Rng) -> BBox {
    let (x, y) = (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0));
    BBox::new(x, y, x + rng.gen_range(2.0..14.0), y + rng.gen_range(2.0..14.0)).expect("positive extent")
}

fn random_props(rng: &mut impl Rng, n: usize, d: usize) -> ProposalSet {
    ProposalSet {
        boxes: (0..n).map(|_| random_box(rng)).collect(),
        features: random_matrix(rng, n, d),
        scores: None,
        labels: vec![0; n],
        domain: Domain::Target,
    }
}

fn prototypes(rng: &mut impl Rng, d: usize) -> BTreeMap<usize, Vec<f64>> {
    let mut out = BTreeMap::new();
    for k in 1..=4 {
        if rng.gen_bool(0.7) {
            out.insert(k, rand_vec(rng, d));
        }
    }
    out
}

fn formula_fidelity_inner() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut names = Vec::new();
    let mut all_ok = true;
    let mut report = |name: &str, w: &Worst| {
        all_ok &= w.ok();
        names.push(format!("{name} {}@{:.1e}", w.count, w.max_dev));
    };

    let mut w = Worst::default();
    for (l, r, t, b, want) in [(2.0, 2.0, 5.0, 5.0, 1.0), (1.0, 3.0, 2.0, 2.0, 0.577_350_269_189_625_8), (0.0, 4.0, 1.0, 1.0, 0.0)] {
        w.see(centerness(l, r, t, b)?, want);
    }
    for _ in 0..FORMULA_INSTANCES {
        let v: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..10.0)).collect();
        if (v[0] == 0.0 && v[1] == 0.0) || (v[2] == 0.0 && v[3] == 0.0) {
            continue;
        }
        w.see(centerness(v[0], v[1], v[2], v[3])?, formulas::centerness(v[0], v[1], v[2], v[3]));
    }
    report("centerness", &w);

    let mut w = Worst::default();
    w.see(edge_weight(&[0.3, -1.0], &[2.0, 0.5], &EdgeScorerParams::zeros(2))?, 0.5);
    let ln3 = 3f64.ln();
    let theta = EdgeScorerParams { theta: Matrix::from_vec(4, 1, vec![ln3, 0.0, 0.0, ln3])? };
    w.see(edge_weight(&[1.0, 0.0], &[0.0, 1.0], &theta)?, 0.9);
    for _ in 0..FORMULA_INSTANCES {
        let c = rng.gen_range(1..6);
        let (fi, fj) = (rand_vec(&mut rng, c), rand_vec(&mut rng, c));
        let p = EdgeScorerParams::random(&mut rng, c);
        w.see(edge_weight(&fi, &fj, &p)?, formulas::edge_weight(&fi, &fj, p.theta.data()));
    }
    report("edge", &w);

    let mut w = Worst::default();
    let same = Matrix::row_vector(&[0.4, -0.2, 1.0]);
    w.see(cdsr_adjacency(&same, &same, 5)?.get(0, 0), 0.5);
    for _ in 0..FORMULA_INSTANCES {
        let (ns, nt, d) = (rng.gen_range(1..=12), rng.gen_range(1..=12), rng.gen_range(1..6));
        let (vs, vt) = (random_matrix(&mut rng, ns, d), random_matrix(&mut rng, nt, d));
        let k = rng.gen_range(1..15);
        let fast = cdsr_adjacency(&vs, &vt, k)?;
        let slow = formulas::cdsr(&vs.to_rows(), &vt.to_rows(), k);
        for (i, row) in slow.iter().enumerate() {
            for (j, s) in row.iter().enumerate() {
                w.see(fast.get(i, j), *s);
            }
        }
    }
    report("cdsr", &w);

    let mut w = Worst::default();
    let one = |v: Vec<f64>| -> BTreeMap<usize, Vec<f64>> { [(1, v)].into() };
    w.see(cda_loss(&PrototypeTable { ps: one(vec![0.0, 0.0]), pt: one(vec![3.0, 4.0]), xi: 1.0 })?, 5.0);
    let cross = PrototypeTable { ps: one(vec![0.0, 0.0]), pt: [(2, vec![0.25, 0.0])].into(), xi: 1.0 };
    w.see(cda_loss(&cross)?, 0.75);
    for _ in 0..FORMULA_INSTANCES {
        let d = rng.gen_range(1..5);
        let t = PrototypeTable { ps: prototypes(&mut rng, d), pt: prototypes(&mut rng, d), xi: rng.gen_range(0.5..2.0) };
        w.see(cda_loss(&t)?, formulas::cda(&t.ps, &t.pt, t.xi));
    }
    report("cda", &w);

    let mut w = Worst::default();
    let pairs = |v: &[(Vec<f64>, Vec<f64>)]| -> BTreeMap<usize, (Vec<f64>, Vec<f64>)> {
        v.iter().cloned().enumerate().map(|(k, p)| (k + 1, p)).collect()
    };
    w.see(compute_w1(&BTreeMap::new())?, 1.0);
    let equal = vec![(vec![1.0, 2.0], vec![1.0, 2.0]), (vec![0.0], vec![0.0]), (vec![-1.0], vec![-1.0])];
    w.see(compute_w1(&pairs(&equal))?, 4.0);
    w.see(compute_w1(&pairs(&[(vec![2f64.ln().sqrt(), 0.0], vec![0.0, 0.0])]))?, 1.5);
    w.see(compute_w2(0, 3)?, 1.0);
    w.see(compute_w2(4, 4)?, std::f64::consts::E);
    w.see(compute_w2(1, 2)?, 1.648_721_270_700_128_2);
    for _ in 0..FORMULA_INSTANCES {
        let d = rng.gen_range(1..5);
        let v: Vec<(Vec<f64>, Vec<f64>)> = (0..rng.gen_range(0..5)).map(|_| (rand_vec(&mut rng, d), rand_vec(&mut rng, d))).collect();
        w.see(compute_w1(&pairs(&v))?, formulas::w1(&v));
        let k = rng.gen_range(1..9);
        let nk = rng.gen_range(0..=k);
        w.see(compute_w2(nk, k)?, formulas::w2(nk, k));
    }
    report("w1/w2", &w);

    let mut w = Worst::default();
    for _ in 0..FORMULA_INSTANCES {
        let d = rng.gen_range(1..5);
        let hidden = rng.gen_range(1..6);
        let disc = DiscriminatorParams::random(&mut rng, d, hidden);
        let (s, t) = (rand_vec(&mut rng, d), rand_vec(&mut rng, d));
        let weights = IorWeights { w1: rng.gen_range(1.0..4.0), w2: rng.gen_range(1.0..2.72) };
        let mut g = Graph::new();
        let p = disc.map(&mut |m| g.constant(m.clone()));
        let sv = g.constant(Matrix::row_vector(&s));
        let tv = g.constant(Matrix::row_vector(&t));
        let ds = discriminate(&mut g, sv, &p)?;
        let dt = discriminate(&mut g, tv, &p)?;
        let slow = formulas::ior(g.scalar(ds), g.scalar(dt), weights.w1, weights.w2);
        w.see(ior_loss(&s, &t, &disc, weights)?, slow);
    }
    report("ior", &w);

    Ok((all_ok, names.join(", ")))
}

/// Closed-form losses and weights against their references, on tabulated
/// examples and random instances.
pub fn formula_fidelity() -> CheckOutcome {
    CheckOutcome::from_result("formula fidelity", formula_fidelity_inner())
}

fn suite_line(name: &str, out: &Result<SuiteOutcome>) -> (bool, String) {
    match out {
        Ok(o) => (o.passed(), format!("{name} {}+{}r/{}f", o.checked, o.redrawn, o.failures)),
        Err(e) => (false, format!("{name} error: {e}")),
    }
}

fn small_detector() -> DetectorConfig {
    DetectorConfig {
        image_size: 16,
        classes: 2,
        shallow_channels: 2,
        deep_channels: 3,
        anchor_sizes: vec![6.0],
        proposals: 4,
        roi_bins: 2,
        hidden: 3,
        ..DetectorConfig::default()
    }
}

fn detector_vars(v: &[Var]) -> DetectorParams<Var> {
    let lp = |i: usize| LinearParams { w: v[2 * i], b: v[2 * i + 1] };
    DetectorParams { conv1: lp(0), conv2: lp(1), conv3: lp(2), rpn: lp(3), fc: lp(4), cls: lp(5), reg: lp(6) }
}

/// Every differentiable loss and layer against central differences.
pub fn gradient_suites() -> CheckOutcome {
    let n = GRADIENT_CONFIGS;
    let mut lines = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(202);

    lines.push(suite_line(
        "nc",
        &run_suite(n, |_| {
            let (ns, nt, c, k) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4), 3);
            let p = PrrParams::random(&mut rng, c, k, 2);
            let labels: Vec<usize> = (0..ns + nt).map(|_| rng.gen_range(1..=k)).collect();
            let mut inputs = vec![random_matrix(&mut rng, ns, c), random_matrix(&mut rng, nt, c)];
            inputs.extend(p.tensors().into_iter().cloned());
            (inputs, move |g: &mut Graph, v: &[Var]| {
                let mut it = v[2..].iter().copied();
                let vars = p.map(&mut |_| it.next().expect("one var per tensor"));
                let (_, logits) = pixel_graph_forward(g, v[0], v[1], &vars)?;
                node_classification_loss(g, logits, &labels)
            })
        }),
    ));

    lines.push(suite_line(
        "cda",
        &run_suite(n, |_| {
            // unit-width prototypes can cancel to an exact zero gradient
            let (ns, nt, d) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(2..5));
            let ls: Vec<usize> = (0..ns).map(|_| rng.gen_range(1..=3)).collect();
            let lt: Vec<usize> = (0..nt).map(|_| rng.gen_range(1..=3)).collect();
            let inputs = vec![random_matrix(&mut rng, ns, d), random_matrix(&mut rng, nt, d)];
            (inputs, move |g: &mut Graph, v: &[Var]| cda_loss_var(g, v[0], &ls, v[1], &lt, 1.0))
        }),
    ));

    lines.push(suite_line(
        "ior",
        &run_suite(n, |_| {
            let d = rng.gen_range(1..5);
            let hidden = rng.gen_range(1..5);
            let disc = DiscriminatorParams::random(&mut rng, d, hidden);
            let w = IorWeights { w1: rng.gen_range(1.0..3.0), w2: rng.gen_range(1.0..2.7) };
            let mut inputs = vec![random_matrix(&mut rng, 2, d), random_matrix(&mut rng, 2, d)];
            inputs.extend(disc.tensors().into_iter().cloned());
            (inputs, move |g: &mut Graph, v: &[Var]| {
                let p = DiscriminatorParams {
                    hidden: LinearParams { w: v[2], b: v[3] },
                    out: LinearParams { w: v[4], b: v[5] },
                };
                // a reversal of -1 exposes the loss's own feature gradient
                ior_loss_var(g, v[0], v[1], &p, w, -1.0)
            })
        }),
    ));

    lines.push(suite_line(
        "detection",
        &run_suite(n, |_| {
            let k = rng.gen_range(2..7);
            let gt: Vec<BBox> = (0..2)
                .map(|i| {
                    let x = 20.0 * i as f64 + rng.gen_range(0.0..5.0);
                    BBox::new(x, 2.0, x + 10.0, 12.0).expect("positive extent")
                })
                .collect();
            let props: Vec<BBox> = (0..k)
                .map(|i| {
                    let g = gt[i % 2];
                    let s = rng.gen_range(-2.0..2.0);
                    BBox::new(g.x1 + s, g.y1 - s, g.x2 + s, g.y2 + 1.0).expect("positive extent")
                })
                .collect();
            let inputs = vec![random_matrix(&mut rng, k, 3), random_matrix(&mut rng, k, 4)];
            (inputs, move |g: &mut Graph, v: &[Var]| detection_loss(g, v[0], v[1], &props, &gt, &[1, 2]))
        }),
    ));

    let cfg = small_detector();
    let all_anchors = anchors(&cfg);
    lines.push(suite_line(
        "rpn",
        &run_suite(n, |_| {
            let x = rng.gen_range(0.0..8.0);
            let gt = vec![BBox::new(x, x, x + 6.0, x + 7.0).expect("positive extent")];
            let a = all_anchors.clone();
            (vec![random_matrix(&mut rng, a.len(), 1)], move |g: &mut Graph, v: &[Var]| rpn_loss(g, v[0], &a, &gt))
        }),
    ));

    lines.push(suite_line(
        "edge",
        &run_suite(n, |_| {
            let (ns, nt, c) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..5));
            let inputs = vec![
                random_matrix(&mut rng, ns, c),
                random_matrix(&mut rng, nt, c),
                random_matrix(&mut rng, 2 * c, 1),
            ];
            (inputs, |g: &mut Graph, v: &[Var]| edge_matrix(g, v[0], v[1], v[2]))
        }),
    ));

    lines.push(suite_line(
        "gcn",
        &run_suite(n, |_| {
            let (k, c) = (rng.gen_range(2..=6), rng.gen_range(1..=4));
            let inputs = vec![
                random_matrix(&mut rng, k, c),
                random_matrix(&mut rng, k, k).map(f64::abs),
                random_matrix(&mut rng, c, c),
                random_matrix(&mut rng, c, c),
            ];
            (inputs, |g: &mut Graph, v: &[Var]| {
                let sym = g.transpose(v[1]);
                let a = g.add(v[1], sym)?;
                let a_hat = g.sym_normalize(a)?;
                gcn_layers(g, v[0], a_hat, &[v[2], v[3]])
            })
        }),
    ));

    lines.push(suite_line(
        "attention",
        &run_suite(n, |_| {
            let (k, c) = (rng.gen_range(1..=6), rng.gen_range(1..=4));
            let mut adj = random_matrix(&mut rng, k, k).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            for i in 0..k {
                adj.set(i, i, 1.0);
            }
            let mask = neighbourhood_mask(&adj).expect("square adjacency");
            let inputs = vec![random_matrix(&mut rng, k, c), random_matrix(&mut rng, c, 3), random_matrix(&mut rng, 6, 1)];
            (inputs, move |g: &mut Graph, v: &[Var]| Ok(attention_layer(g, v[0], &mask, v[1], v[2])?.0))
        }),
    ));

    lines.push(suite_line(
        "discriminator",
        &run_suite(n, |_| {
            let d = rng.gen_range(1..5);
            let hidden = rng.gen_range(1..5);
            let disc = DiscriminatorParams::random(&mut rng, d, hidden);
            let mut inputs = vec![random_matrix(&mut rng, 3, d)];
            inputs.extend(disc.tensors().into_iter().cloned());
            (inputs, |g: &mut Graph, v: &[Var]| {
                let p = DiscriminatorParams {
                    hidden: LinearParams { w: v[1], b: v[2] },
                    out: LinearParams { w: v[3], b: v[4] },
                };
                discriminate(g, v[0], &p)
            })
        }),
    ));

    lines.push(suite_line(
        "bgcm",
        &run_suite(n, |_| {
            let (ns, nt, d) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4));
            let (vs, vt) = (random_matrix(&mut rng, ns, d), random_matrix(&mut rng, nt, d));
            let edges = cdsr_adjacency(&vs, &vt, 10).expect("matching widths");
            let gcn = GcnParams::random(&mut rng, d, 2);
            let mut inputs = vec![vs, vt];
            inputs.extend(gcn.tensors().into_iter().cloned());
            (inputs, move |g: &mut Graph, v: &[Var]| {
                semantic_bgcm(g, v[0], v[1], &edges, &GcnParams { weights: v[2..].to_vec() })
            })
        }),
    ));

    lines.push(suite_line(
        "gam",
        &run_suite(n, |_| {
            let k = rng.gen_range(1..7);
            let props = random_props(&mut rng, k, 3);
            let adj = intra_semantic_adjacency(&props, 90.0).expect("valid proposals");
            let gat = GatParams::random(&mut rng, 3, 3);
            (vec![props.features, gat.w, gat.a], move |g: &mut Graph, v: &[Var]| {
                semantic_gam(g, v[0], &adj, &GatParams { w: v[1], a: v[2] })
            })
        }),
    ));

    lines.push(suite_line(
        "detector layers",
        &run_suite(n, |_| {
            let image = Image {
                height: cfg.image_size,
                width: cfg.image_size,
                pixels: random_matrix(&mut rng, cfg.image_size * cfg.image_size, 3).map(|v| 0.5 + 0.5 * v),
            };
            let mut p = DetectorParams::random(&mut rng, &cfg);
            // zero biases on zero inputs would park ReLUs on their kink
            for layer in [&mut p.conv1, &mut p.conv2, &mut p.conv3, &mut p.fc] {
                layer.b = random_matrix(&mut rng, 1, layer.b.cols()).map(|v| 0.1 * v);
            }
            let inputs: Vec<Matrix> = p.tensors().into_iter().cloned().collect();
            let (cfg, a) = (cfg.clone(), all_anchors.clone());
            (inputs, move |g: &mut Graph, v: &[Var]| {
                let gt = [BBox::new(2.0, 3.0, 9.0, 9.0)?];
                let pv = detector_vars(v);
                let x = image_input(g, &image);
                let s = backbone_shallow(g, x, &pv, &cfg)?;
                let d = backbone_deep(g, s, &pv, &cfg)?;
                let obj = objectness(g, d, &pv)?;
                let rpn = rpn_loss(g, obj, &a, &gt)?;
                let props = [a[5], a[10], gt[0]];
                let f = roi_features(g, d, &props, &pv, &cfg)?;
                let (c, r) = heads(g, f, &pv)?;
                let det = detection_loss(g, c, r, &props, &gt, &[2])?;
                g.add(rpn, det)
            })
        }),
    ));

    let passed = lines.iter().all(|(ok, _)| *ok);
    let detail = lines.into_iter().map(|(_, l)| l).collect::<Vec<_>>().join(", ");
    CheckOutcome { name: "gradients".into(), passed, detail: format!("checked+redrawn/failed: {detail}") }
}

fn graph_invariants_inner() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut violations = BTreeSet::new();
    let mut worst_oracle = 0.0f64;
    for _ in 0..GRAPH_CASES {
        let (ns, nt, c) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..4));
        let (vs, vt) = (random_matrix(&mut rng, ns, c), random_matrix(&mut rng, nt, c));
        let p = EdgeScorerParams::random(&mut rng, c);
        let mut g = Graph::new();
        let (a, b, t) = (g.constant(vs.clone()), g.constant(vt.clone()), g.constant(p.theta.clone()));
        let e = edge_matrix(&mut g, a, b, t)?;
        let e = g.value(e).clone();
        let aug = augment_bipartite(&vs, &vt, &e)?;
        let adj = &aug.adjacency;
        let n = ns + nt;
        if adj != &adj.transpose() {
            violations.insert("augmented symmetry");
        }
        for i in 0..n {
            for j in 0..n {
                if (i < ns) == (j < ns) && adj.get(i, j) != 0.0 {
                    violations.insert("augmented zero blocks");
                }
                if i < ns && j >= ns && adj.get(i, j) != e.get(i, j - ns) {
                    violations.insert("augmented off-diagonal block");
                }
            }
        }

        let norm = normalize_adjacency(adj)?;
        let asym = norm.data().iter().zip(norm.transpose().data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if asym > 1e-12 {
            violations.insert("normalized symmetry");
        }

        let gcn = GcnParams::random(&mut rng, c, 2);
        let fast = gcn_forward(&aug.nodes, &norm, &gcn)?;
        let layers: Vec<Vec<Vec<f64>>> = gcn.weights.iter().map(Matrix::to_rows).collect();
        let slow = dense_graph_reference(&aug.nodes.to_rows(), &adj.to_rows(), DenseMode::Gcn { layers: &layers })
            .map_err(|e| FgrrError::Precondition(e.to_string()))?;
        worst_oracle = worst_oracle.max(OracleResult::measure(slow.concat(), fast.data()).max_abs_dev);

        let gat = GatParams::random(&mut rng, c, 3);
        let (fast, alpha) = graph_attention(&aug.nodes, adj, &gat)?;
        let slow = dense_graph_reference(
            &aug.nodes.to_rows(),
            &adj.to_rows(),
            DenseMode::Gat { w: &gat.w.to_rows(), a: gat.a.data(), negative_slope: ATTENTION_SLOPE },
        )
        .map_err(|e| FgrrError::Precondition(e.to_string()))?;
        worst_oracle = worst_oracle.max(OracleResult::measure(slow.concat(), fast.data()).max_abs_dev);
        for i in 0..n {
            if (alpha.row(i).iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                violations.insert("attention row sums");
            }
        }

        let m = rng.gen_range(1..10);
        let props = random_props(&mut rng, m, 3);
        let diag = 64.0 * 2f64.sqrt();
        let intra = intra_semantic_adjacency(&props, diag)?;
        if intra != intra.transpose() || (0..m).any(|i| intra.get(i, i) != 1.0) {
            violations.insert("intra symmetry/diagonal");
        }
        let boxes: Vec<[f64; 4]> = props.boxes.iter().map(BBox::as_array).collect();
        let slow = formulas::intra_adjacency(&boxes, &props.features.to_rows(), diag);
        if (0..m).any(|i| (0..m).any(|j| intra.get(i, j) != f64::from(slow[i][j]))) {
            violations.insert("intra oracle");
        }
    }
    if worst_oracle > 1e-9 {
        violations.insert("dense oracle");
    }
    let passed = violations.is_empty();
    let detail = if passed {
        format!("{GRAPH_CASES} cases, dense oracle max dev {worst_oracle:.1e}")
    } else {
        format!("{GRAPH_CASES} cases, violated: {}", violations.into_iter().collect::<Vec<_>>().join(", "))
    };
    Ok((passed, detail))
}

/// Structural properties of the cross- and intra-domain graphs and of the
/// propagation layers built on them.
pub fn graph_invariants() -> CheckOutcome {
    CheckOutcome::from_result("graph invariants", graph_invariants_inner())
}

fn matching_inner() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    let mut pairs_seen = 0;
    for _ in 0..MATCHING_CASES {
        let c = rng.gen_range(1..=8);
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let tgt = FeatureMap::from_pixels(Stage::Shallow, h, w, random_matrix(&mut rng, h * w, c))?;
        let n = rng.gen_range(0..40);
        let features = random_matrix(&mut rng, n, c);
        let refs = (0..n).map(|i| PixelRef { y: i, x: 0, label: Some(rng.gen_range(1..=3)) }).collect();
        let src = PixelSet { refs, features, domain: Domain::Source };
        let (pairs, _) = mutual_nn_match(&src, &tgt)?;
        let fast: BTreeSet<_> = pairs.pairs.iter().map(|p| (p.source, p.target, p.class)).collect();
        let slow = exhaustive_mutual_nn(&src.features.to_rows(), &src.labels(), &tgt.pixels().to_rows())
            .map_err(|e| FgrrError::Precondition(e.to_string()))?;
        pairs_seen += slow.len();
        if fast != slow {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{MATCHING_CASES} instances, {pairs_seen} oracle pairs, {mismatches} mismatches")))
}

/// Mutual nearest-neighbour matching against exhaustive search.
pub fn matching_oracle() -> CheckOutcome {
    CheckOutcome::from_result("matching", matching_inner())
}

/// Tiny run used to show that disabled modules stay untouched.
pub fn freeze_config(toggles: Toggles) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        decay_epoch: 1,
        warmup_fraction: 0.0,
        learning_rate: 0.01,
        toggles,
        data: DatasetSpec { seed: 3, shift: Shift::Moderate, source_train: 4, target_train: 4, target_test: 2 },
        ..TrainConfig::default()
    }
}

fn loss_and_freeze_inner() -> Result<(bool, String)> {
    let mut problems = Vec::new();
    let cfg = TrainConfig::default();
    let b = LossBundle { det: 1.0, nc: 2.0, cda: 3.0, ior: 4.0 };
    let cases = [
        (b, cfg.clone(), 5.5),
        (LossBundle { det: 0.7, ..LossBundle::default() }, cfg.clone(), 0.7),
        (b, TrainConfig { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..cfg.clone() }, 1.0),
    ];
    for (bundle, c, want) in &cases {
        if (total_loss(bundle, c)? - want).abs() > 1e-12 {
            problems.push(format!("total {want}"));
        }
    }
    if total_loss(&LossBundle { ior: f64::INFINITY, ..b }, &cfg).is_ok() {
        problems.push("non-finite accepted".into());
    }

    let nc: fn(&LossBundle) -> f64 = |l| l.nc;
    let cda: fn(&LossBundle) -> f64 = |l| l.cda;
    let ior: fn(&LossBundle) -> f64 = |l| l.ior;
    let disabled = [
        ("prr", Toggles { prr: false, ..Toggles::FULL }, Module::Prr, nc),
        ("srr", Toggles { srr: false, ..Toggles::FULL }, Module::Srr, cda),
        ("ior", Toggles { ior: false, ..Toggles::FULL }, Module::Discriminator, ior),
    ];
    let mut runs = 0;
    for (name, toggles, module, term) in disabled {
        let cfg = freeze_config(toggles);
        let (report, model) = train(&cfg, &cfg.dataset()?)?;
        runs += 1;
        if report.step_losses.iter().any(|l| term(l) != 0.0) {
            problems.push(format!("{name} loss nonzero"));
        }
        if model.fingerprint(module) != Model::init(&cfg).fingerprint(module) {
            problems.push(format!("{name} parameters moved"));
        }
        if model.fingerprint(Module::Detector) == Model::init(&cfg).fingerprint(Module::Detector) {
            problems.push(format!("{name} run left the detector untouched"));
        }
    }
    let detail = if problems.is_empty() {
        format!("{} total-loss examples, {runs} runs with a disabled module", cases.len())
    } else {
        problems.join(", ")
    };
    Ok((problems.is_empty(), detail))
}

/// Composite objective arithmetic and freezing of disabled modules.
pub fn loss_and_freeze() -> CheckOutcome {
    CheckOutcome::from_result("loss/toggles", loss_and_freeze_inner())
}

/// The whole battery in a fixed order.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![formula_fidelity(), gradient_suites(), graph_invariants(), matching_oracle(), loss_and_freeze()]
}

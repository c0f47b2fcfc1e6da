//! Adaptation training: the weighted objective, the paired source/target
//! loop, evaluation on held-out target images, run reports and ablations.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::detector::{
    anchors, assign_proposals, backbone_deep, backbone_shallow, detect, detection_loss, heads, image_input,
    objectness, propose, roi_features, rpn_loss, softmax_rows, DetectorConfig, DetectorParams,
};
use crate::error::{FgrrError, Result};
use crate::geometry::{BBox, FeatureMap, Stage};
use crate::image_reweighting::{ior_loss_var, DiscriminatorParams, IorWeights};
use crate::metrics::{evaluate_map, GroundTruth};
use crate::optim::Momentum;
use crate::pixel_correspondence::{class_centroids, mutual_nn_match, select_source_foreground, PixelSelectionConfig};
use crate::pixel_reasoning::{fuse_back_var, node_classification_loss, pixel_graph_forward, PrrParams};
use crate::plot::{plot_series, Series};
use crate::scene::{Dataset, DatasetSpec, Scene};
use crate::semantic_reasoning::{
    cda_loss_var, cdsr_adjacency, intra_semantic_adjacency, pseudo_label_selection, semantic_bgcm, semantic_gam,
    ProposalSet, SemanticConfig, SrrParams,
};
use crate::tensor::Matrix;

/// Which adaptation modules take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub prr: bool,
    pub srr: bool,
    pub ior: bool,
}

impl Toggles {
    pub const FULL: Self = Self { prr: true, srr: true, ior: true };
    pub const SOURCE_ONLY: Self = Self { prr: false, srr: false, ior: false };

    pub fn any(&self) -> bool {
        self.prr || self.srr || self.ior
    }
}

/// A named toggle set of an ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPrr,
    NoSrr,
    NoIor,
    SourceOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoPrr, Variant::NoSrr, Variant::NoIor, Variant::SourceOnly];

    pub fn toggles(self) -> Toggles {
        match self {
            Variant::Full => Toggles::FULL,
            Variant::NoPrr => Toggles { prr: false, ..Toggles::FULL },
            Variant::NoSrr => Toggles { srr: false, ..Toggles::FULL },
            Variant::NoIor => Toggles { ior: false, ..Toggles::FULL },
            Variant::SourceOnly => Toggles::SOURCE_ONLY,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPrr => "no_prr",
            Variant::NoSrr => "no_srr",
            Variant::NoIor => "no_ior",
            Variant::SourceOnly => "source_only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = FgrrError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| FgrrError::Config(format!("unknown variant `{s}`")))
    }
}

/// Parse a comma-separated variant list such as `full,no_prr,source_only`.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let out: Vec<Variant> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(FgrrError::Config("no variants given".into()));
    }
    Ok(out)
}

/// Which shallow maps receive the reasoned pixel features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelFusion {
    /// Target map only. Source pixels are chosen from ground truth, so fusing
    /// there marks objects with a cue that is absent at inference.
    Target,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the pixel node-classification loss.
    pub lambda1: f64,
    /// Weight of the prototype alignment loss.
    pub lambda2: f64,
    /// Weight of the reweighted adversarial loss.
    pub lambda3: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// First epoch trained at the decayed learning rate.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    /// Fraction of steps before pseudo-labels and correspondences are used.
    pub warmup_fraction: f64,
    pub seed: u64,
    pub toggles: Toggles,
    pub pixel: PixelSelectionConfig,
    pub semantic: SemanticConfig,
    /// Gradient reversal coefficient in front of the discriminator.
    pub reversal: f64,
    /// Ramp the reversal coefficient up from 0 over training.
    pub reversal_ramp: bool,
    pub pixel_fusion: PixelFusion,
    pub max_pixel_nodes: usize,
    pub max_semantic_nodes: usize,
    pub gcn_layers: usize,
    pub discriminator_hidden: usize,
    pub detector: DetectorConfig,
    pub data: DatasetSpec,
    /// Load images from here instead of generating them from `data`.
    pub data_dir: Option<PathBuf>,
    /// Training stops once the total loss exceeds this.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 1.0,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 20,
            decay_epoch: 10,
            decay_factor: 0.1,
            warmup_fraction: 0.2,
            seed: 0,
            toggles: Toggles::FULL,
            pixel: PixelSelectionConfig::default(),
            semantic: SemanticConfig::default(),
            reversal: 0.1,
            reversal_ramp: false,
            pixel_fusion: PixelFusion::Target,
            max_pixel_nodes: 64,
            max_semantic_nodes: 32,
            gcn_layers: 2,
            discriminator_hidden: 16,
            detector: DetectorConfig::default(),
            data: DatasetSpec::default(),
            data_dir: None,
            divergence_threshold: 1e6,
        }
    }
}

/// Data order of a run is drawn from `seed ^ SHUFFLE_SALT`: every epoch
/// shuffles the source indices, then the target indices.
pub const SHUFFLE_SALT: u64 = 0x5eed_0f_0da7a;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "FGRR_SEED";

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FgrrError::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.epochs == 0 {
            return Err(FgrrError::Config("need learning_rate > 0, momentum in [0, 1), epochs > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(FgrrError::Config("warmup_fraction must be in [0, 1)".into()));
        }
        if self.max_pixel_nodes == 0 || self.max_semantic_nodes == 0 || self.gcn_layers == 0 {
            return Err(FgrrError::Config("node caps and GCN depth must be positive".into()));
        }
        self.pixel.validate()?;
        self.semantic.validate()?;
        self.detector.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replace the seed with `value` when it is set; it must parse as `u64`.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| FgrrError::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn with_variant(&self, variant: Variant, seed: u64) -> Self {
        Self {
            toggles: variant.toggles(),
            seed,
            ..self.clone()
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data_dir {
            Some(dir) => Dataset::load(dir),
            None => Dataset::generate(&self.data),
        }
    }
}

/// Named scalar losses of one step or the mean over an epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub det: f64,
    pub nc: f64,
    pub cda: f64,
    pub ior: f64,
}

/// `L_det + λ1 L_NC + λ2 L_CDA + λ3 L_IOR`; any non-finite component aborts.
pub fn total_loss(bundle: &LossBundle, cfg: &TrainConfig) -> Result<f64> {
    for (component, value) in [("det", bundle.det), ("nc", bundle.nc), ("cda", bundle.cda), ("ior", bundle.ior)] {
        if !value.is_finite() {
            return Err(FgrrError::NonFinite { component: component.into(), value });
        }
    }
    Ok(bundle.det + cfg.lambda1 * bundle.nc + cfg.lambda2 * bundle.cda + cfg.lambda3 * bundle.ior)
}

/// All learnable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub detector: DetectorParams,
    pub prr: PrrParams,
    pub srr: SrrParams,
    pub discriminator: DiscriminatorParams,
}

/// A parameter group of [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    Detector,
    Prr,
    Srr,
    Discriminator,
}

impl Model {
    /// Every module is drawn from the seed in a fixed order, whatever the
    /// toggles, so variants of one seed share their initial detector.
    pub fn init(cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = &cfg.detector;
        let detector = DetectorParams::random(&mut rng, d);
        let prr = PrrParams::random(&mut rng, d.shallow_channels, d.classes, cfg.gcn_layers);
        let srr = SrrParams::random(&mut rng, d.hidden, cfg.gcn_layers);
        let discriminator =
            DiscriminatorParams::random(&mut rng, d.shallow_channels + d.deep_channels, cfg.discriminator_hidden);
        Self { detector, prr, srr, discriminator }
    }

    pub fn tensors(&self, module: Module) -> Vec<&Matrix> {
        match module {
            Module::Detector => self.detector.tensors(),
            Module::Prr => self.prr.tensors(),
            Module::Srr => self.srr.tensors(),
            Module::Discriminator => self.discriminator.tensors(),
        }
    }

    /// Hash of the exact bits of a module's parameters.
    pub fn fingerprint(&self, module: Module) -> u64 {
        let mut h = DefaultHasher::new();
        for m in self.tensors(module) {
            m.shape().hash(&mut h);
            for v in m.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Evenly spaced subset of `0..n` with at most `cap` entries.
fn spread(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        (0..cap).map(|i| i * n / cap).collect()
    }
}

struct Optimizers {
    detector: Momentum,
    prr: Momentum,
    srr: Momentum,
    discriminator: Momentum,
}

impl Optimizers {
    fn new(model: &Model, momentum: f64) -> Self {
        Self {
            detector: Momentum::new(momentum, &model.detector.tensors()),
            prr: Momentum::new(momentum, &model.prr.tensors()),
            srr: Momentum::new(momentum, &model.srr.tensors()),
            discriminator: Momentum::new(momentum, &model.discriminator.tensors()),
        }
    }
}

fn collect(grads: &Gradients, vars: &[&Var], values: &[&Matrix]) -> Vec<Matrix> {
    vars.iter().zip(values).map(|(v, m)| grads.get_or_zeros(**v, m)).collect()
}

/// Global image descriptor: channel means of the shallow and deep maps.
fn global_feature(g: &mut Graph, shallow: Var, deep: Var) -> Result<Var> {
    let a = g.mean_rows(shallow)?;
    let b = g.mean_rows(deep)?;
    g.concat_cols(&[a, b])
}

/// Pixel correspondences of one image pair in shallow-map coordinates.
struct PixelMatch {
    source_rows: Vec<usize>,
    source_labels: Vec<usize>,
    target_rows: Vec<usize>,
    target_labels: Vec<usize>,
    weights: IorWeights,
}

fn match_pixels(cfg: &TrainConfig, source: &Scene, fs: &FeatureMap, ft: &FeatureMap) -> Result<Option<PixelMatch>> {
    let scale = fs.width() as f64 / source.image.width as f64;
    let objects: Vec<(BBox, usize)> =
        source.boxes.iter().zip(&source.labels).map(|(b, &l)| (b.scaled(scale), l)).collect();
    let selected = select_source_foreground(fs, &objects, &cfg.pixel)?;
    let selected = selected.subset(&spread(selected.len(), cfg.max_pixel_nodes));
    if selected.is_empty() {
        return Ok(None);
    }
    let (pairs, target) = mutual_nn_match(&selected, ft)?;
    if pairs.is_empty() {
        return Ok(None);
    }
    let cs = class_centroids(fs, &selected.refs)?;
    let ct = class_centroids(ft, &target.refs)?;
    Ok(Some(PixelMatch {
        source_rows: selected.linear_indices(fs.width()),
        source_labels: selected.labels(),
        target_rows: target.linear_indices(ft.width()),
        target_labels: target.labels(),
        weights: IorWeights::from_centroids(&cs, &ct, cfg.detector.classes)?,
    }))
}

/// Schedule values of one step.
#[derive(Debug, Clone, Copy)]
struct Phase {
    /// Correspondences and pseudo-labels are in use.
    adapt: bool,
    lr: f64,
    reversal: f64,
}

/// Reversal coefficient after `progress` in `[0, 1]` of training; rises
/// smoothly from 0 towards `coeff` when ramped.
pub fn reversal_at(coeff: f64, ramp: bool, progress: f64) -> f64 {
    if ramp {
        coeff * (2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0)
    } else {
        coeff
    }
}

/// One optimisation step on a source/target pair; returns its losses.
fn train_step(
    model: &mut Model,
    opt: &mut Optimizers,
    cfg: &TrainConfig,
    source: &Scene,
    target: &Scene,
    phase: Phase,
) -> Result<LossBundle> {
    let dc = &cfg.detector;
    let t = cfg.toggles;
    let mut g = Graph::new();
    let det = model.detector.map(&mut |m| g.param(m.clone()));
    let prr = t.prr.then(|| model.prr.map(&mut |m| g.param(m.clone())));
    let srr = t.srr.then(|| model.srr.map(&mut |m| g.param(m.clone())));
    let disc = t.ior.then(|| model.discriminator.map(&mut |m| g.param(m.clone())));
    let zero = g.constant(Matrix::scalar(0.0));

    let xs = image_input(&mut g, &source.image);
    let mut shallow_s = backbone_shallow(&mut g, xs, &det, dc)?;
    let mut shallow_t = None;
    let (mut nc, mut cda, mut ior) = (zero, zero, zero);
    let mut weights = IorWeights::unit();

    if t.any() {
        let xt = image_input(&mut g, &target.image);
        let st = backbone_shallow(&mut g, xt, &det, dc)?;
        shallow_t = Some(st);
        if phase.adapt && (t.prr || t.ior) {
            let n = dc.shallow_size();
            let fs = FeatureMap::from_pixels(Stage::Shallow, n, n, g.value(shallow_s).clone())?;
            let ft = FeatureMap::from_pixels(Stage::Shallow, n, n, g.value(st).clone())?;
            if let Some(m) = match_pixels(cfg, source, &fs, &ft)? {
                weights = m.weights;
                if let Some(p) = &prr {
                    let vs = g.gather_rows(shallow_s, &m.source_rows)?;
                    let vt = g.gather_rows(st, &m.target_rows)?;
                    let (reasoned, logits) = pixel_graph_forward(&mut g, vs, vt, p)?;
                    let labels: Vec<usize> = m.source_labels.iter().chain(&m.target_labels).copied().collect();
                    nc = node_classification_loss(&mut g, logits, &labels)?;
                    let ns = m.source_rows.len();
                    let rs = g.gather_rows(reasoned, &(0..ns).collect::<Vec<_>>())?;
                    let rt = g.gather_rows(reasoned, &(ns..labels.len()).collect::<Vec<_>>())?;
                    if cfg.pixel_fusion == PixelFusion::Both {
                        shallow_s = fuse_back_var(&mut g, shallow_s, &m.source_rows, rs)?;
                    }
                    shallow_t = Some(fuse_back_var(&mut g, st, &m.target_rows, rt)?);
                }
            }
        }
    }

    let deep_s = backbone_deep(&mut g, shallow_s, &det, dc)?;
    let all_anchors = anchors(dc);
    let obj_s = objectness(&mut g, deep_s, &det)?;
    let rpn = rpn_loss(&mut g, obj_s, &all_anchors, &source.boxes)?;
    let mut props_s = propose(g.value(obj_s), &all_anchors, dc)?;
    props_s.extend(source.boxes.iter().copied());
    let mut feats_s = roi_features(&mut g, deep_s, &props_s, &det, dc)?;

    let deep_t = match shallow_t {
        Some(st) => Some(backbone_deep(&mut g, st, &det, dc)?),
        None => None,
    };

    if let (Some(p), Some(dt), true) = (&srr, deep_t, phase.adapt) {
        let obj_t = objectness(&mut g, dt, &det)?;
        let props_t = propose(g.value(obj_t), &all_anchors, dc)?;
        let feats_t = roi_features(&mut g, dt, &props_t, &det, dc)?;
        let (cls_t, _) = heads(&mut g, feats_t, &det)?;
        let scores = softmax_rows(g.value(cls_t));
        let kept = pseudo_label_selection(&scores, cfg.semantic.keep_fraction, cfg.semantic.min_score)?;
        let kept: Vec<(usize, usize)> = spread(kept.len(), cfg.max_semantic_nodes).into_iter().map(|i| kept[i]).collect();
        let (labels_s, _) = assign_proposals(&props_s, &source.boxes, &source.labels)?;
        let positives: Vec<usize> = (0..props_s.len()).filter(|&i| labels_s[i] > 0).collect();
        let positives: Vec<usize> = spread(positives.len(), cfg.max_semantic_nodes).into_iter().map(|i| positives[i]).collect();
        if !kept.is_empty() && !positives.is_empty() {
            let rows_t: Vec<usize> = kept.iter().map(|&(r, _)| r).collect();
            let lt: Vec<usize> = kept.iter().map(|&(_, k)| k).collect();
            let ls: Vec<usize> = positives.iter().map(|&i| labels_s[i]).collect();
            let vs = g.gather_rows(feats_s, &positives)?;
            let vt = g.gather_rows(feats_t, &rows_t)?;
            let edges = cdsr_adjacency(g.value(vs), g.value(vt), cfg.semantic.k_nn)?;
            let h = semantic_bgcm(&mut g, vs, vt, &edges, &p.gcn)?;
            let ns = positives.len();
            let hs = g.gather_rows(h, &(0..ns).collect::<Vec<_>>())?;
            let ht = g.gather_rows(h, &(ns..ns + rows_t.len()).collect::<Vec<_>>())?;
            cda = cda_loss_var(&mut g, hs, &ls, ht, &lt, cfg.semantic.xi)?;
            let nodes = ProposalSet {
                boxes: positives.iter().map(|&i| props_s[i]).collect(),
                features: g.value(hs).clone(),
                scores: None,
                labels: ls,
                domain: source.domain,
            };
            let adjacency = intra_semantic_adjacency(&nodes, source.image.diagonal())?;
            let attended = semantic_gam(&mut g, hs, &adjacency, &p.gat)?;
            feats_s = g.scatter_add_rows(feats_s, attended, &positives)?;
        }
    }

    let (cls_s, reg_s) = heads(&mut g, feats_s, &det)?;
    let roi = detection_loss(&mut g, cls_s, reg_s, &props_s, &source.boxes, &source.labels)?;
    let det_loss = g.add(rpn, roi)?;

    if let (Some(p), Some(st), Some(dt)) = (&disc, shallow_t, deep_t) {
        let gs = global_feature(&mut g, shallow_s, deep_s)?;
        let gt = global_feature(&mut g, st, dt)?;
        ior = ior_loss_var(&mut g, gs, gt, p, weights, phase.reversal)?;
    }

    let bundle = LossBundle {
        det: g.scalar(det_loss),
        nc: g.scalar(nc),
        cda: g.scalar(cda),
        ior: g.scalar(ior),
    };
    total_loss(&bundle, cfg)?;
    let terms = [(det_loss, 1.0), (nc, cfg.lambda1), (cda, cfg.lambda2), (ior, cfg.lambda3)];
    let mut objective = zero;
    for (v, w) in terms {
        let scaled = g.scale(v, w);
        objective = g.add(objective, scaled)?;
    }
    let grads = g.backward(objective);

    let dg = collect(&grads, &det.tensors(), &model.detector.tensors());
    opt.detector.step(model.detector.tensors_mut(), &dg, phase.lr)?;
    if let Some(p) = &prr {
        let pg = collect(&grads, &p.tensors(), &model.prr.tensors());
        opt.prr.step(model.prr.tensors_mut(), &pg, phase.lr)?;
    }
    if let Some(p) = &srr {
        let sg = collect(&grads, &p.tensors(), &model.srr.tensors());
        opt.srr.step(model.srr.tensors_mut(), &sg, phase.lr)?;
    }
    if let Some(p) = &disc {
        let gg = collect(&grads, &p.tensors(), &model.discriminator.tensors());
        opt.discriminator.step(model.discriminator.tensors_mut(), &gg, phase.lr)?;
    }
    Ok(bundle)
}

/// mAP@0.5 of the detector on labelled scenes.
pub fn evaluate(detector: &DetectorParams, cfg: &DetectorConfig, scenes: &[Scene]) -> Result<f64> {
    let mut preds = Vec::with_capacity(scenes.len());
    let mut truths = Vec::with_capacity(scenes.len());
    for s in scenes {
        preds.push(detect(&s.image, detector, cfg)?);
        truths.push(s.boxes.iter().zip(&s.labels).map(|(&bbox, &class)| GroundTruth { bbox, class }).collect());
    }
    evaluate_map(&preds, &truths, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean losses over the epoch's steps.
    pub losses: LossBundle,
    pub total: f64,
    pub target_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    /// Total loss of every step, in order.
    pub step_losses: Vec<LossBundle>,
    pub final_map: f64,
    pub best_map: f64,
    pub wall_clock_secs: f64,
    /// Why training stopped early, if it did.
    pub aborted: Option<String>,
}

/// Train from the configured seed and return the report and final model.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<(RunReport, Model)> {
    train_with_callback(cfg, data, |_| {})
}

/// [`train`] with a hook called after every epoch.
pub fn train_with_callback(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(RunReport, Model)> {
    cfg.validate()?;
    if data.source_train.is_empty() || (cfg.toggles.any() && data.target_train.is_empty()) {
        return Err(FgrrError::Precondition("training needs source images and, when adapting, target images".into()));
    }
    let started = Instant::now();
    let mut model = Model::init(cfg);
    let mut opt = Optimizers::new(&model, cfg.momentum);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let steps_per_epoch = data.source_train.len();
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup = (cfg.warmup_fraction * total_steps as f64).ceil() as usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut aborted = None;
    let mut step = 0;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = if epoch < cfg.decay_epoch { cfg.learning_rate } else { cfg.learning_rate * cfg.decay_factor };
        let mut src_order: Vec<usize> = (0..data.source_train.len()).collect();
        let mut tgt_order: Vec<usize> = (0..data.target_train.len()).collect();
        src_order.shuffle(&mut order_rng);
        tgt_order.shuffle(&mut order_rng);
        let mut sum = LossBundle::default();
        let mut sum_total = 0.0;
        for i in 0..steps_per_epoch {
            let s = &data.source_train[src_order[i]];
            let t = if tgt_order.is_empty() { s } else { &data.target_train[tgt_order[i % tgt_order.len()]] };
            let phase = Phase {
                adapt: step >= warmup,
                lr,
                reversal: reversal_at(cfg.reversal, cfg.reversal_ramp, step as f64 / total_steps as f64),
            };
            let b = train_step(&mut model, &mut opt, cfg, s, t, phase)?;
            let total = total_loss(&b, cfg)?;
            step_losses.push(b);
            step += 1;
            if total > cfg.divergence_threshold {
                aborted = Some(FgrrError::Diverged { step, loss: total }.to_string());
                break 'epochs;
            }
            sum.det += b.det;
            sum.nc += b.nc;
            sum.cda += b.cda;
            sum.ior += b.ior;
            sum_total += total;
        }
        let n = steps_per_epoch as f64;
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            losses: LossBundle {
                det: sum.det / n,
                nc: sum.nc / n,
                cda: sum.cda / n,
                ior: sum.ior / n,
            },
            total: sum_total / n,
            target_map: evaluate(&model.detector, &cfg.detector, &data.target_test)?,
        };
        on_epoch(&record);
        history.push(record);
    }

    let final_map = history.last().map_or(0.0, |r| r.target_map);
    let best_map = history.iter().map(|r| r.target_map).fold(0.0, f64::max);
    Ok((
        RunReport {
            config: cfg.clone(),
            history,
            step_losses,
            final_map,
            best_map,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            aborted,
        },
        model,
    ))
}

/// Saved model plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Per-epoch CSV; contains no timing so equal runs give equal bytes.
pub fn metrics_csv(report: &RunReport) -> String {
    let mut out = String::from("epoch,learning_rate,det,nc,cda,ior,total,target_map\n");
    for r in &report.history {
        let l = &r.losses;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.learning_rate, l.det, l.nc, l.cda, l.ior, r.total, r.target_map
        ));
    }
    out
}

/// Write `metrics.csv`, `report.json`, `loss.png`, `map.png` and
/// `checkpoint.json` into `dir`.
pub fn write_run(dir: &Path, report: &RunReport, model: &Model) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(report))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    let series = |f: fn(&EpochRecord) -> f64| report.history.iter().map(f).collect::<Vec<_>>();
    plot_series(
        &dir.join("loss.png"),
        &[
            Series { values: series(|r| r.total), colour: [200, 40, 40] },
            Series { values: series(|r| r.losses.det), colour: [40, 40, 200] },
        ],
    )?;
    plot_series(&dir.join("map.png"), &[Series { values: series(|r| r.target_map), colour: [30, 150, 60] }])?;
    Checkpoint { config: report.config.clone(), model: model.clone() }.save(&dir.join("checkpoint.json"))
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Final target mAP per seed, in seed order.
    pub maps: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant");
        for s in &self.seeds {
            out.push_str(&format!(",seed_{s}"));
        }
        out.push_str(",median\n");
        for r in &self.rows {
            out.push_str(r.variant.name());
            for m in &r.maps {
                out.push_str(&format!(",{m}"));
            }
            out.push_str(&format!(",{}\n", r.median));
        }
        out
    }
}

/// One training run per variant and seed, rows in `variants` order.
/// `on_run` sees every finished report.
pub fn ablate(
    base: &TrainConfig,
    data: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    mut on_run: impl FnMut(Variant, u64, &RunReport),
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(FgrrError::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut maps = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let (report, _) = train(&base.with_variant(v, seed), data)?;
            on_run(v, seed, &report);
            maps.push(report.final_map);
        }
        rows.push(AblationRow { variant: v, median: median(&maps), maps });
    }
    Ok(AblationTable { seeds: seeds.to_vec(), rows })
}

/// Seeds `base, base + 1, ...`.
pub fn seed_range(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base + i).collect()
}

/// Per-variant medians keyed by name.
pub fn medians(table: &AblationTable) -> BTreeMap<String, f64> {
    table.rows.iter().map(|r| (r.variant.name().to_string(), r.median)).collect()
}

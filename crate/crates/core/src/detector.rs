//! A small two-stage detector.
//!
//! Three 3x3 convolutions form the backbone: the first (stride 2) is the
//! shallow tap used for pixel graphs, the last two (stride 2, then 1) give
//! the deep map. A 1x1 objectness scorer ranks a fixed anchor grid on the
//! deep map; the best anchors after overlap suppression are the proposals.
//! Each proposal is average-pooled into a grid of bins, passed through a
//! hidden layer, and scored by a classifier (background first) and a
//! class-agnostic box regressor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeometry, Graph, Var};
use crate::error::{FgrrError, Result};
use crate::geometry::{iou, BBox, FeatureMap, Stage};
use crate::metrics::Detection;
use crate::nn::{linear, LinearParams};
use crate::pixel_correspondence::Domain;
use crate::scene::Image;
use crate::semantic_reasoning::ProposalSet;
use crate::tensor::Matrix;

/// Standard deviations that scale regression targets to unit range.
const BOX_STD: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub classes: usize,
    pub shallow_channels: usize,
    pub deep_channels: usize,
    pub anchor_sizes: Vec<f64>,
    pub proposals: usize,
    pub proposal_nms: f64,
    pub roi_bins: usize,
    pub hidden: usize,
    /// Per-class suppression threshold at inference.
    pub detection_nms: f64,
    pub min_detection_score: f64,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            classes: 4,
            shallow_channels: 8,
            deep_channels: 16,
            anchor_sizes: vec![12.0, 17.0, 24.0],
            proposals: 32,
            proposal_nms: 0.7,
            roi_bins: 3,
            hidden: 32,
            detection_nms: 0.5,
            min_detection_score: 0.01,
            max_detections: 20,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(FgrrError::Config("image size must be a multiple of 4, at least 8".into()));
        }
        if self.classes == 0 || self.anchor_sizes.is_empty() || self.proposals == 0 || self.roi_bins == 0 {
            return Err(FgrrError::Config("classes, anchors, proposals and bins must be positive".into()));
        }
        if self.shallow_channels == 0 || self.deep_channels == 0 || self.hidden == 0 {
            return Err(FgrrError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn shallow_size(&self) -> usize {
        self.image_size / 2
    }

    pub fn deep_size(&self) -> usize {
        self.image_size / 4
    }

    /// Image pixels per deep-map cell.
    pub fn deep_stride(&self) -> f64 {
        4.0
    }

    fn conv(&self, size: usize, channels: usize, stride: usize) -> ConvGeometry {
        ConvGeometry {
            height: size,
            width: size,
            channels,
            kernel: 3,
            stride,
            padding: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams<T = Matrix> {
    pub conv1: LinearParams<T>,
    pub conv2: LinearParams<T>,
    pub conv3: LinearParams<T>,
    pub rpn: LinearParams<T>,
    pub fc: LinearParams<T>,
    pub cls: LinearParams<T>,
    pub reg: LinearParams<T>,
}

impl<T> DetectorParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DetectorParams<U> {
        DetectorParams {
            conv1: self.conv1.map(f),
            conv2: self.conv2.map(f),
            conv3: self.conv3.map(f),
            rpn: self.rpn.map(f),
            fc: self.fc.map(f),
            cls: self.cls.map(f),
            reg: self.reg.map(f),
        }
    }

    fn layers(&self) -> [&LinearParams<T>; 7] {
        [&self.conv1, &self.conv2, &self.conv3, &self.rpn, &self.fc, &self.cls, &self.reg]
    }

    pub fn tensors(&self) -> Vec<&T> {
        self.layers().into_iter().flat_map(LinearParams::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        [
            &mut self.conv1,
            &mut self.conv2,
            &mut self.conv3,
            &mut self.rpn,
            &mut self.fc,
            &mut self.cls,
            &mut self.reg,
        ]
        .into_iter()
        .flat_map(LinearParams::tensors_mut)
        .collect()
    }
}

impl DetectorParams {
    pub fn random(rng: &mut impl Rng, cfg: &DetectorConfig) -> Self {
        let (c1, c2) = (cfg.shallow_channels, cfg.deep_channels);
        let bins = cfg.roi_bins * cfg.roi_bins;
        Self {
            conv1: LinearParams::he(rng, 9 * 3, c1),
            conv2: LinearParams::he(rng, 9 * c1, c2),
            conv3: LinearParams::he(rng, 9 * c2, c2),
            rpn: LinearParams::scaled(rng, c2, cfg.anchor_sizes.len(), 0.1),
            fc: LinearParams::he(rng, bins * c2, cfg.hidden),
            cls: LinearParams::scaled(rng, cfg.hidden, cfg.classes + 1, 0.1),
            reg: LinearParams::scaled(rng, cfg.hidden, 4, 0.01),
        }
    }
}

/// The image as a centred `[H*W, 3]` constant.
pub fn image_input(g: &mut Graph, image: &Image) -> Var {
    g.constant(image.pixels.map(|v| v - 0.5))
}

fn conv_relu(g: &mut Graph, x: Var, geom: ConvGeometry, p: &LinearParams<Var>) -> Result<Var> {
    let cols = g.im2col(x, geom)?;
    let y = linear(g, cols, p)?;
    Ok(g.relu(y))
}

/// Shallow tap `[(S/2)^2, C1]`.
pub fn backbone_shallow(g: &mut Graph, image: Var, p: &DetectorParams<Var>, cfg: &DetectorConfig) -> Result<Var> {
    conv_relu(g, image, cfg.conv(cfg.image_size, 3, 2), &p.conv1)
}

/// Deep map `[(S/4)^2, C2]` from the (possibly fused) shallow tap.
pub fn backbone_deep(g: &mut Graph, shallow: Var, p: &DetectorParams<Var>, cfg: &DetectorConfig) -> Result<Var> {
    let h = conv_relu(g, shallow, cfg.conv(cfg.shallow_size(), cfg.shallow_channels, 2), &p.conv2)?;
    conv_relu(g, h, cfg.conv(cfg.deep_size(), cfg.deep_channels, 1), &p.conv3)
}

/// Objectness logits `[cells, anchors per cell]`; entry `i` of the row-major
/// data belongs to anchor `i` of [`anchors`].
pub fn objectness(g: &mut Graph, deep: Var, p: &DetectorParams<Var>) -> Result<Var> {
    linear(g, deep, &p.rpn)
}

/// Square anchors centred on every deep cell, cell-major.
pub fn anchors(cfg: &DetectorConfig) -> Vec<BBox> {
    let n = cfg.deep_size();
    let s = cfg.deep_stride();
    let mut out = Vec::with_capacity(n * n * cfg.anchor_sizes.len());
    for y in 0..n {
        for x in 0..n {
            let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
            for &a in &cfg.anchor_sizes {
                let h = a / 2.0;
                out.push(BBox { x1: cx - h, y1: cy - h, x2: cx + h, y2: cy + h }.clipped(cfg.image_size as f64, cfg.image_size as f64));
            }
        }
    }
    out
}

/// Greedy suppression: indices in descending score order (lower index on
/// ties), dropping any box whose IoU with a kept box exceeds `threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], threshold: f64, limit: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() == limit {
            break;
        }
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Top anchors by objectness after suppression.
pub fn propose(objectness: &Matrix, anchors: &[BBox], cfg: &DetectorConfig) -> Result<Vec<BBox>> {
    if objectness.len() != anchors.len() {
        return Err(FgrrError::Shape(format!("{} scores for {} anchors", objectness.len(), anchors.len())));
    }
    let keep = nms(anchors, objectness.data(), cfg.proposal_nms, cfg.proposals);
    Ok(keep.into_iter().map(|i| anchors[i]).collect())
}

/// Deep-map cells pooled into each bin of each box, `bins^2` groups per box.
pub fn roi_regions(boxes: &[BBox], cfg: &DetectorConfig) -> Vec<Vec<usize>> {
    let n = cfg.deep_size();
    let s = cfg.deep_stride();
    let bins = cfg.roi_bins;
    let mut out = Vec::with_capacity(boxes.len() * bins * bins);
    let cell_range = |lo: f64, hi: f64| -> (usize, usize) {
        // cells whose centre lies in [lo, hi); at least the nearest one
        let first = (lo - 0.5).ceil().max(0.0) as usize;
        let last = ((hi - 0.5).ceil() as isize - 1).min(n as isize - 1);
        if last < first as isize {
            let c = (0.5 * (lo + hi) - 0.5).round().clamp(0.0, (n - 1) as f64) as usize;
            (c, c)
        } else {
            (first.min(n - 1), last as usize)
        }
    };
    for b in boxes {
        let (x1, y1) = (b.x1 / s, b.y1 / s);
        let (bw, bh) = (b.width() / s / bins as f64, b.height() / s / bins as f64);
        for by in 0..bins {
            let (ya, yb) = cell_range(y1 + by as f64 * bh, y1 + (by + 1) as f64 * bh);
            for bx in 0..bins {
                let (xa, xb) = cell_range(x1 + bx as f64 * bw, x1 + (bx + 1) as f64 * bw);
                out.push((ya..=yb).flat_map(|y| (xa..=xb).map(move |x| y * n + x)).collect());
            }
        }
    }
    out
}

/// Hidden ROI features `[boxes, hidden]`.
pub fn roi_features(
    g: &mut Graph,
    deep: Var,
    boxes: &[BBox],
    p: &DetectorParams<Var>,
    cfg: &DetectorConfig,
) -> Result<Var> {
    let pooled = g.region_pool(deep, roi_regions(boxes, cfg), cfg.roi_bins * cfg.roi_bins)?;
    let h = linear(g, pooled, &p.fc)?;
    Ok(g.relu(h))
}

/// Classifier logits `[n, K+1]` and regression deltas `[n, 4]`.
pub fn heads(g: &mut Graph, features: Var, p: &DetectorParams<Var>) -> Result<(Var, Var)> {
    Ok((linear(g, features, &p.cls)?, linear(g, features, &p.reg)?))
}

/// Normalised offsets that move `proposal` onto `target`.
pub fn encode_box(proposal: &BBox, target: &BBox) -> [f64; 4] {
    let (pw, ph) = (proposal.width().max(1e-6), proposal.height().max(1e-6));
    let (px, py) = proposal.center();
    let (tx, ty) = target.center();
    let raw = [
        (tx - px) / pw,
        (ty - py) / ph,
        (target.width().max(1e-6) / pw).ln(),
        (target.height().max(1e-6) / ph).ln(),
    ];
    std::array::from_fn(|i| raw[i] / BOX_STD[i])
}

/// Inverse of [`encode_box`], clipped to the image.
pub fn decode_box(proposal: &BBox, deltas: &[f64], image_size: f64) -> BBox {
    let d: [f64; 4] = std::array::from_fn(|i| deltas[i] * BOX_STD[i]);
    let (pw, ph) = (proposal.width(), proposal.height());
    let (px, py) = proposal.center();
    let (cx, cy) = (px + d[0] * pw, py + d[1] * ph);
    let (w, h) = (pw * d[2].clamp(-4.0, 4.0).exp(), ph * d[3].clamp(-4.0, 4.0).exp());
    BBox {
        x1: cx - w / 2.0,
        y1: cy - h / 2.0,
        x2: cx + w / 2.0,
        y2: cy + h / 2.0,
    }
    .clipped(image_size, image_size)
}

/// Index and IoU of the most-overlapping ground-truth box (first on ties).
fn best_match(b: &BBox, gt: &[BBox]) -> Option<(usize, f64)> {
    gt.iter().enumerate().map(|(i, g)| (i, iou(b, g))).fold(None, |acc, (i, o)| match acc {
        Some((_, bo)) if bo >= o => acc,
        _ => Some((i, o)),
    })
}

/// Class label per proposal: the matched ground-truth class when the best
/// IoU is at least 0.5, otherwise background 0. Also returns the matched
/// ground-truth index of every positive.
pub fn assign_proposals(proposals: &[BBox], gt_boxes: &[BBox], gt_labels: &[usize]) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    if gt_boxes.len() != gt_labels.len() {
        return Err(FgrrError::Shape("one label per ground-truth box".into()));
    }
    let matches: Vec<Option<usize>> = proposals
        .iter()
        .map(|p| best_match(p, gt_boxes).filter(|&(_, o)| o >= 0.5).map(|(i, _)| i))
        .collect();
    let labels = matches.iter().map(|m| m.map_or(0, |i| gt_labels[i])).collect();
    Ok((labels, matches))
}

/// Balanced objectness loss. Anchors with IoU >= 0.5 to some box, or the
/// best anchor of a box, are positive; anchors below 0.3 are negative; the
/// rest are ignored. Positives and negatives each carry half the weight.
pub fn rpn_loss(g: &mut Graph, objectness: Var, anchors: &[BBox], gt_boxes: &[BBox]) -> Result<Var> {
    let n = anchors.len();
    if g.value(objectness).len() != n {
        return Err(FgrrError::Shape("one objectness logit per anchor".into()));
    }
    let mut target = vec![0.0; n];
    let mut ignored = vec![false; n];
    for (a, anchor) in anchors.iter().enumerate() {
        let best = best_match(anchor, gt_boxes).map_or(0.0, |(_, o)| o);
        if best >= 0.5 {
            target[a] = 1.0;
        } else if best >= 0.3 {
            ignored[a] = true;
        }
    }
    for gt in gt_boxes {
        let best = (0..n).fold(0, |b, a| if iou(&anchors[a], gt) > iou(&anchors[b], gt) { a } else { b });
        if iou(&anchors[best], gt) > 0.0 {
            target[best] = 1.0;
            ignored[best] = false;
        }
    }
    let pos = (0..n).filter(|&a| target[a] == 1.0).count();
    let neg = (0..n).filter(|&a| target[a] == 0.0 && !ignored[a]).count();
    let weights: Vec<f64> = (0..n)
        .map(|a| {
            if target[a] == 1.0 {
                0.5 / pos as f64
            } else if ignored[a] {
                0.0
            } else {
                0.5 / neg.max(1) as f64
            }
        })
        .collect();
    g.bce_with_logits(objectness, &target, &weights)
}

/// Cross-entropy over all proposals plus smooth-L1 regression averaged over
/// the positives (classification only when there are none).
pub fn detection_loss(
    g: &mut Graph,
    cls_logits: Var,
    deltas: Var,
    proposals: &[BBox],
    gt_boxes: &[BBox],
    gt_labels: &[usize],
) -> Result<Var> {
    let (labels, matches) = assign_proposals(proposals, gt_boxes, gt_labels)?;
    let cls = g.softmax_cross_entropy(cls_logits, &labels)?;
    let positives: Vec<usize> = (0..proposals.len()).filter(|&i| matches[i].is_some()).collect();
    if positives.is_empty() {
        return Ok(cls);
    }
    let rows: Vec<Vec<f64>> = positives
        .iter()
        .map(|&i| encode_box(&proposals[i], &gt_boxes[matches[i].expect("positive")]).to_vec())
        .collect();
    let targets = g.constant(Matrix::from_rows(&rows)?);
    let pred = g.gather_rows(deltas, &positives)?;
    let diff = g.sub(pred, targets)?;
    let l1 = g.smooth_l1(diff);
    let reg = g.sum(l1);
    let reg = g.scale(reg, 1.0 / positives.len() as f64);
    g.add(cls, reg)
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - top).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Feature maps and scored proposals of one image.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub shallow: FeatureMap,
    pub deep: FeatureMap,
    pub proposals: ProposalSet,
    pub deltas: Matrix,
}

pub fn detector_forward(image: &Image, p: &DetectorParams, cfg: &DetectorConfig, domain: Domain) -> Result<ForwardOutput> {
    if image.height != cfg.image_size || image.width != cfg.image_size {
        return Err(FgrrError::Shape(format!(
            "image is {}x{}, detector expects {}",
            image.height, image.width, cfg.image_size
        )));
    }
    let mut g = Graph::new();
    let pv = p.map(&mut |m| g.constant(m.clone()));
    let x = image_input(&mut g, image);
    let shallow = backbone_shallow(&mut g, x, &pv, cfg)?;
    let deep = backbone_deep(&mut g, shallow, &pv, cfg)?;
    let obj = objectness(&mut g, deep, &pv)?;
    let boxes = propose(g.value(obj), &anchors(cfg), cfg)?;
    let feats = roi_features(&mut g, deep, &boxes, &pv, cfg)?;
    let (cls, reg) = heads(&mut g, feats, &pv)?;
    let n = boxes.len();
    Ok(ForwardOutput {
        shallow: FeatureMap::from_pixels(Stage::Shallow, cfg.shallow_size(), cfg.shallow_size(), g.value(shallow).clone())?,
        deep: FeatureMap::from_pixels(Stage::Deep, cfg.deep_size(), cfg.deep_size(), g.value(deep).clone())?,
        proposals: ProposalSet {
            boxes,
            features: g.value(feats).clone(),
            scores: Some(softmax_rows(g.value(cls))),
            labels: vec![0; n],
            domain,
        },
        deltas: g.value(reg).clone(),
    })
}

/// Per-class decoded, suppressed detections of one forward pass.
pub fn postprocess(out: &ForwardOutput, cfg: &DetectorConfig) -> Vec<Detection> {
    let props = &out.proposals;
    let scores = props.scores.as_ref().expect("forward pass fills scores");
    let decoded: Vec<BBox> = (0..props.len())
        .map(|i| decode_box(&props.boxes[i], out.deltas.row(i), cfg.image_size as f64))
        .collect();
    let mut dets = Vec::new();
    for k in 1..=cfg.classes {
        let cand: Vec<usize> = (0..props.len())
            .filter(|&i| scores.get(i, k) >= cfg.min_detection_score && decoded[i].area() > 0.0)
            .collect();
        let boxes: Vec<BBox> = cand.iter().map(|&i| decoded[i]).collect();
        let s: Vec<f64> = cand.iter().map(|&i| scores.get(i, k)).collect();
        for j in nms(&boxes, &s, cfg.detection_nms, usize::MAX) {
            dets.push(Detection { bbox: boxes[j], score: s[j], class: k });
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(cfg.max_detections);
    dets
}

pub fn detect(image: &Image, p: &DetectorParams, cfg: &DetectorConfig) -> Result<Vec<Detection>> {
    Ok(postprocess(&detector_forward(image, p, cfg, Domain::Target)?, cfg))
}

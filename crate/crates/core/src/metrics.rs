//! Mean average precision with every-point interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{FgrrError, Result};
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

/// Area under the monotone precision envelope, given hit flags in score
/// order and the number of ground-truth boxes.
pub fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.into_iter().zip(recall) {
        if r > prev {
            ap += (r - prev) * p;
            prev = r;
        }
    }
    ap
}

/// mAP over the classes that have ground truth somewhere.
///
/// Detections of a class are ranked by score (ties keep image, then list
/// order). Each is compared with the same-class ground truth of its image
/// that it overlaps most; it is a hit when that overlap reaches
/// `iou_threshold` and the box was not claimed by a higher-ranked detection.
pub fn evaluate_map(predictions: &[Vec<Detection>], truths: &[Vec<GroundTruth>], iou_threshold: f64) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(FgrrError::Shape(format!(
            "{} prediction lists for {} images",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.iter().flatten().any(|d| !d.score.is_finite()) {
        return Err(FgrrError::Precondition("detection score is not finite".into()));
    }
    let mut classes: Vec<usize> = truths.iter().flatten().map(|t| t.class).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &k in &classes {
        let positives = truths.iter().flatten().filter(|t| t.class == k).count();
        let mut ranked: Vec<(usize, &Detection)> = predictions
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| ds.iter().filter(|d| d.class == k).map(move |d| (img, d)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut claimed: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|&(img, d)| {
                let best = truths[img]
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.class == k)
                    .map(|(g, t)| (g, iou(&d.bbox, &t.bbox)))
                    .fold(None, |acc: Option<(usize, f64)>, (g, o)| match acc {
                        Some((_, bo)) if bo >= o => acc,
                        _ => Some((g, o)),
                    });
                match best {
                    Some((g, o)) if o >= iou_threshold && !claimed[img][g] => {
                        claimed[img][g] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        total += average_precision(&hits, positives);
    }
    Ok(total / classes.len() as f64)
}

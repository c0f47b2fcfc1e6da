//! Brute-force mean average precision.

use crate::formulas::iou;

/// One predicted box: `(box, score, class)`.
pub type Prediction = ([f64; 4], f64, usize);
/// One ground-truth box: `(box, class)`.
pub type Truth = ([f64; 4], usize);

/// mAP over classes that have at least one ground-truth box, using greedy
/// score-ordered matching and every-point interpolation. Equal scores keep
/// image order, then prediction order.
pub fn brute_force_map(predictions: &[Vec<Prediction>], truths: &[Vec<Truth>], iou_threshold: f64) -> f64 {
    let mut classes: Vec<usize> = truths.iter().flatten().map(|t| t.1).collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &k in &classes {
        let positives = truths.iter().flatten().filter(|t| t.1 == k).count();
        let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
        for (img, preds) in predictions.iter().enumerate() {
            for (d, p) in preds.iter().enumerate() {
                if p.2 == k {
                    ranked.push((img, d, p.1));
                }
            }
        }
        // insertion sort: stable, descending by score
        for i in 1..ranked.len() {
            let mut j = i;
            while j > 0 && ranked[j - 1].2 < ranked[j].2 {
                ranked.swap(j - 1, j);
                j -= 1;
            }
        }
        let mut taken: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
        let mut is_tp = Vec::with_capacity(ranked.len());
        for &(img, d, _) in &ranked {
            let pbox = predictions[img][d].0;
            let mut best = -1.0;
            let mut best_idx = None;
            for (g, t) in truths[img].iter().enumerate() {
                if t.1 != k {
                    continue;
                }
                let o = iou(pbox, t.0);
                if o > best {
                    best = o;
                    best_idx = Some(g);
                }
            }
            let tp = match best_idx {
                Some(g) if best >= iou_threshold && !taken[img][g] => {
                    taken[img][g] = true;
                    true
                }
                _ => false,
            };
            is_tp.push(tp);
        }
        let mut precision = Vec::new();
        let mut recall = Vec::new();
        let mut tp = 0usize;
        for (i, &hit) in is_tp.iter().enumerate() {
            if hit {
                tp += 1;
            }
            precision.push(tp as f64 / (i + 1) as f64);
            recall.push(tp as f64 / positives as f64);
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for i in 0..precision.len() {
            if recall[i] > prev_recall {
                let best_after = precision[i..].iter().cloned().fold(0.0, f64::max);
                ap += (recall[i] - prev_recall) * best_after;
                prev_recall = recall[i];
            }
        }
        total += ap;
    }
    total / classes.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let t = vec![vec![([0.0, 0.0, 10.0, 10.0], 1), ([20.0, 20.0, 30.0, 30.0], 2)]];
        let p = vec![t[0].iter().map(|&(b, c)| (b, 1.0, c)).collect()];
        assert_eq!(brute_force_map(&p, &t, 0.5), 1.0);
    }

    #[test]
    fn no_predictions_score_zero() {
        let t = vec![vec![([0.0, 0.0, 10.0, 10.0], 1)]];
        assert_eq!(brute_force_map(&[vec![]], &t, 0.5), 0.0);
    }
}

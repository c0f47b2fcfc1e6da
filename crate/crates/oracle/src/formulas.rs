//! Closed-form references, one function per formula, no shortcuts.

use std::collections::BTreeMap;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn centerness(l: f64, r: f64, t: f64, b: f64) -> f64 {
    let horiz = if l < r { l / r } else { r / l };
    let vert = if t < b { t / b } else { b / t };
    (horiz * vert).sqrt()
}

/// IoU of `[x1, y1, x2, y2]` boxes; any zero-area box gives 0.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    inter / (area_a + area_b - inter)
}

pub fn center_distance(a: [f64; 4], b: [f64; 4], diagonal: f64) -> f64 {
    let dx = (a[0] + a[2]) / 2.0 - (b[0] + b[2]) / 2.0;
    let dy = (a[1] + a[3]) / 2.0 - (b[1] + b[3]) / 2.0;
    (dx * dx + dy * dy).sqrt() / diagonal
}

pub fn edge_weight(fi: &[f64], fj: &[f64], theta: &[f64]) -> f64 {
    let concat: Vec<f64> = fi.iter().chain(fj).cloned().collect();
    sigmoid(concat.iter().zip(theta).map(|(x, t)| x * t).sum())
}

fn mean_top_k(mut sims: Vec<f64>, k: usize) -> f64 {
    sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sims[..k].iter().sum::<f64>() / k as f64
}

/// Hubness-corrected cross-domain similarity for every source/target pair,
/// with the neighbourhood size clamped to both set sizes.
pub fn cdsr(vs: &[Vec<f64>], vt: &[Vec<f64>], k_nn: usize) -> Vec<Vec<f64>> {
    let k = k_nn.min(vs.len()).min(vt.len()).max(1);
    let r_t: Vec<f64> = vs
        .iter()
        .map(|s| mean_top_k(vt.iter().map(|t| cosine(s, t)).collect(), k))
        .collect();
    let r_s: Vec<f64> = vt
        .iter()
        .map(|t| mean_top_k(vs.iter().map(|s| cosine(s, t)).collect(), k))
        .collect();
    vs.iter()
        .enumerate()
        .map(|(i, s)| {
            vt.iter()
                .enumerate()
                .map(|(j, t)| sigmoid(2.0 * cosine(s, t) - r_t[i] - r_s[j]))
                .collect()
        })
        .collect()
}

pub fn class_means(features: &[Vec<f64>], labels: &[usize]) -> BTreeMap<usize, Vec<f64>> {
    let mut out = BTreeMap::new();
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort();
    classes.dedup();
    for k in classes {
        let members: Vec<&Vec<f64>> = features
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == k)
            .map(|(f, _)| f)
            .collect();
        let dim = members[0].len();
        let mut mean = vec![0.0; dim];
        for m in &members {
            for d in 0..dim {
                mean[d] += m[d];
            }
        }
        for v in mean.iter_mut() {
            *v /= members.len() as f64;
        }
        out.insert(k, mean);
    }
    out
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Prototype pull term over shared classes plus hinge push term over ordered
/// cross-class pairs.
pub fn cda(ps: &BTreeMap<usize, Vec<f64>>, pt: &BTreeMap<usize, Vec<f64>>, margin: f64) -> f64 {
    let mut loss = 0.0;
    for (k, s) in ps {
        if let Some(t) = pt.get(k) {
            loss += euclid(s, t);
        }
    }
    for (m, s) in ps {
        for (n, t) in pt {
            if m != n {
                loss += (margin - euclid(s, t)).max(0.0);
            }
        }
    }
    loss
}

/// Spatial-and-semantic intra-domain adjacency evaluated pair by pair.
pub fn intra_adjacency(boxes: &[[f64; 4]], features: &[Vec<f64>], diagonal: f64) -> Vec<Vec<u8>> {
    let n = boxes.len();
    let mut a = vec![vec![0u8; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                a[i][j] = 1;
                continue;
            }
            let spatial = center_distance(boxes[i], boxes[j], diagonal) < 0.5 || iou(boxes[i], boxes[j]) > 0.5;
            let semantic = cosine(&features[i], &features[j]) > 0.5;
            a[i][j] = u8::from(spatial && semantic);
        }
    }
    a
}

pub fn w1(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    1.0 + pairs
        .iter()
        .map(|(s, t)| {
            let d2: f64 = s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            (-d2).exp()
        })
        .sum::<f64>()
}

pub fn w2(shared: usize, classes: usize) -> f64 {
    (shared as f64 / classes as f64).exp()
}

/// Weighted adversarial loss for one source and one target discriminator output.
pub fn ior(d_source: f64, d_target: f64, w1: f64, w2: f64) -> f64 {
    let clamp = |p: f64| p.clamp(1e-7, 1.0 - 1e-7);
    -(w1 + w2) / 2.0 * (clamp(d_source).ln() + clamp(1.0 - d_target).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((centerness(1.0, 3.0, 2.0, 2.0) - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((iou([0.0, 0.0, 2.0, 2.0], [1.0, 0.0, 3.0, 2.0]) - 1.0 / 3.0).abs() < 1e-15);
        assert!((edge_weight(&[1.0, 0.0], &[0.0, 1.0], &[3f64.ln(), 0.0, 0.0, 3f64.ln()]) - 0.9).abs() < 1e-12);
        assert!((w1(&[(vec![2f64.ln().sqrt()], vec![0.0])]) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn cda_margin_case() {
        let ps = BTreeMap::from([(1, vec![0.0]), (2, vec![0.25])]);
        let pt = ps.clone();
        assert!((cda(&ps, &pt, 1.0) - 1.5).abs() < 1e-12);
    }
}

//! Exhaustive cross-domain nearest-neighbour matching.

use std::collections::BTreeSet;

use crate::{OracleError, MAX_MATCH_NODES};

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let mut dot = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if aa == 0.0 || bb == 0.0 {
        None
    } else {
        Some(dot / (aa.sqrt() * bb.sqrt()))
    }
}

/// Index of the row in `pool` most cosine-similar to `query`; the lowest index
/// wins ties. Zero-norm rows are never candidates.
fn nearest(query: &[f64], pool: &[Vec<f64>]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, row) in pool.iter().enumerate() {
        if let Some(c) = cosine(query, row) {
            match best {
                Some((_, b)) if c <= b => {}
                _ => best = Some((j, c)),
            }
        }
    }
    best
}

/// Every `(source, target, label)` triple where the target is the source's
/// nearest neighbour and the target's nearest source carries the same label.
/// When several sources claim one target, only the most similar survives
/// (lowest source index on ties).
pub fn exhaustive_mutual_nn(
    src: &[Vec<f64>],
    src_labels: &[usize],
    tgt: &[Vec<f64>],
) -> Result<BTreeSet<(usize, usize, usize)>, OracleError> {
    if src.len() > MAX_MATCH_NODES || tgt.len() > MAX_MATCH_NODES {
        return Err(OracleError::SizeCapExceeded {
            got: src.len().max(tgt.len()),
            cap: MAX_MATCH_NODES,
        });
    }
    if src.len() != src_labels.len() {
        return Err(OracleError::Shape(format!(
            "{} source rows but {} labels",
            src.len(),
            src_labels.len()
        )));
    }
    // target index -> (source index, label, cosine)
    let mut claims: Vec<Option<(usize, usize, f64)>> = vec![None; tgt.len()];
    for (i, row) in src.iter().enumerate() {
        let Some((j, c)) = nearest(row, tgt) else {
            continue;
        };
        let Some((back, _)) = nearest(&tgt[j], src) else {
            continue;
        };
        if src_labels[back] != src_labels[i] {
            continue;
        }
        match claims[j] {
            Some((_, _, prev)) if c <= prev => {}
            _ => claims[j] = Some((i, src_labels[i], c)),
        }
    }
    Ok(claims
        .iter()
        .enumerate()
        .filter_map(|(j, c)| c.map(|(i, k, _)| (i, j, k)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_identical_pair() {
        let set = exhaustive_mutual_nn(&[vec![1.0, 2.0]], &[3], &[vec![1.0, 2.0]]).unwrap();
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![(0, 0, 3)]);
    }

    #[test]
    fn empty_source_gives_empty_set() {
        let set = exhaustive_mutual_nn(&[], &[], &[vec![1.0]]).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn refuses_oversized_inputs() {
        let big = vec![vec![1.0]; MAX_MATCH_NODES + 1];
        let err = exhaustive_mutual_nn(&[vec![1.0]], &[1], &big).unwrap_err();
        assert!(matches!(err, OracleError::SizeCapExceeded { .. }));
    }

    #[test]
    fn label_disagreement_drops_pair() {
        // source 1 (class 2) points to target 0, whose nearest source is 0 (class 1)
        let src = vec![vec![1.0, 0.0], vec![1.0, 0.2]];
        let tgt = vec![vec![1.0, 0.05], vec![0.0, 1.0]];
        let set = exhaustive_mutual_nn(&src, &[1, 2], &tgt).unwrap();
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![(0, 0, 1)]);
    }
}

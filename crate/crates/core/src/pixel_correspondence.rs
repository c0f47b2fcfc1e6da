//! Foreground pixel mining on shallow feature maps.
//!
//! Source pixels are kept when they sit inside a box, resemble their class
//! centroid and lie close to the box centre. Target pixels are then found by
//! cross-domain nearest-neighbour search and inherit the source class when
//! the search agrees in both directions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FgrrError, Result};
use crate::geometry::{centerness, cosine_similarity, BBox, FeatureMap, PixelRef};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelSelectionConfig {
    /// Cosine-to-centroid threshold.
    pub tau1: f64,
    /// Centerness threshold.
    pub tau2: f64,
}

impl Default for PixelSelectionConfig {
    fn default() -> Self {
        Self { tau1: 0.75, tau2: 0.5 }
    }
}

impl PixelSelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > -1.0 && self.tau1 <= 1.0) || !(0.0..=1.0).contains(&self.tau2) {
            return Err(FgrrError::Config(format!(
                "thresholds out of range: tau1={}, tau2={}",
                self.tau1, self.tau2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

/// Selected pixels with their features (`[N, C]`, row `n` belongs to `refs[n]`).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSet {
    pub refs: Vec<PixelRef>,
    pub features: Matrix,
    pub domain: Domain,
}

impl PixelSet {
    pub fn empty(domain: Domain, channels: usize) -> Self {
        Self {
            refs: Vec::new(),
            features: Matrix::zeros(0, channels),
            domain,
        }
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    /// Labels of all pixels; every pixel of a selected set is labelled.
    pub fn labels(&self) -> Vec<usize> {
        self.refs.iter().map(|r| r.label.unwrap_or(0)).collect()
    }

    /// Linear indices `y * W + x` into a map of width `width`.
    pub fn linear_indices(&self, width: usize) -> Vec<usize> {
        self.refs.iter().map(|r| r.y * width + r.x).collect()
    }

    /// Keep only the rows at `keep` (in that order).
    pub fn subset(&self, keep: &[usize]) -> Self {
        let mut features = Matrix::zeros(keep.len(), self.features.cols());
        for (o, &i) in keep.iter().enumerate() {
            features.row_mut(o).copy_from_slice(self.features.row(i));
        }
        Self {
            refs: keep.iter().map(|&i| self.refs[i]).collect(),
            features,
            domain: self.domain,
        }
    }
}

/// One accepted correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct MatchedPair {
    /// Row in the source [`PixelSet`].
    pub source: usize,
    /// Linear pixel index `y * W + x` in the target map.
    pub target: usize,
    pub class: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchedPairs {
    /// Sorted by target pixel index.
    pub pairs: Vec<MatchedPair>,
}

impl MatchedPairs {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct classes that received at least one match.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.pairs.iter().map(|p| p.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Per-class mean feature over labelled pixels.
pub fn class_centroids(fm: &FeatureMap, labeled_pixels: &[PixelRef]) -> Result<BTreeMap<usize, Vec<f64>>> {
    let c = fm.channels();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for p in labeled_pixels {
        let label = p
            .label
            .ok_or_else(|| FgrrError::Precondition(format!("pixel ({}, {}) has no label", p.y, p.x)))?;
        if p.y >= fm.height() || p.x >= fm.width() {
            return Err(FgrrError::Precondition(format!("pixel ({}, {}) outside map", p.y, p.x)));
        }
        let entry = sums.entry(label).or_insert_with(|| (vec![0.0; c], 0));
        for (s, v) in entry.0.iter_mut().zip(fm.feature(p.y, p.x)) {
            *s += v;
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(k, (sum, n))| (k, sum.into_iter().map(|s| s / n as f64).collect()))
        .collect())
}

fn is_dead(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

/// Best centerness of pixel `(y, x)` over `boxes`, or `None` when the pixel
/// centre is not strictly inside any of them.
fn best_centerness(y: usize, x: usize, boxes: &[&BBox]) -> Option<f64> {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    boxes
        .iter()
        .filter_map(|b| {
            let (l, r, t, bo) = (px - b.x1, b.x2 - px, py - b.y1, b.y2 - py);
            if l < 0.0 || r < 0.0 || t < 0.0 || bo < 0.0 {
                return None;
            }
            centerness(l, r, t, bo).ok()
        })
        .reduce(f64::max)
}

/// Pixels inside the boxes of each class, as `(class, linear index)` with a
/// pixel listed once per class whose box contains it.
fn in_box_pixels(fm: &FeatureMap, boxes: &[(BBox, usize)]) -> BTreeMap<usize, Vec<usize>> {
    let mut per_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(ref b, k) in boxes {
        let list = per_class.entry(k).or_default();
        let y0 = b.y1.max(0.0).floor() as usize;
        let x0 = b.x1.max(0.0).floor() as usize;
        let y1 = (b.y2.ceil() as usize).min(fm.height());
        let x1 = (b.x2.ceil() as usize).min(fm.width());
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if px >= b.x1 && px <= b.x2 && py >= b.y1 && py <= b.y2 {
                    list.push(fm.index(y, x));
                }
            }
        }
    }
    for list in per_class.values_mut() {
        list.sort_unstable();
        list.dedup();
    }
    per_class
}

/// Source foreground pixels. Boxes are in feature-map coordinates (image
/// coordinates divided by the backbone stride); a pixel is located at its
/// centre `(x + 0.5, y + 0.5)`. Dead (all-zero) pixels are never foreground,
/// and pixels covered by boxes of more than one class are skipped.
pub fn select_source_foreground(
    fm: &FeatureMap,
    boxes: &[(BBox, usize)],
    cfg: &PixelSelectionConfig,
) -> Result<PixelSet> {
    cfg.validate()?;
    let w = fm.width();
    let per_class = in_box_pixels(fm, boxes);

    let mut owners: BTreeMap<usize, usize> = BTreeMap::new();
    for list in per_class.values() {
        for &p in list {
            *owners.entry(p).or_default() += 1;
        }
    }

    let mut refs = Vec::new();
    for (&k, list) in &per_class {
        let live: Vec<PixelRef> = list
            .iter()
            .filter(|&&p| !is_dead(fm.pixels().row(p)))
            .map(|&p| PixelRef {
                y: p / w,
                x: p % w,
                label: Some(k),
            })
            .collect();
        let centroids = class_centroids(fm, &live)?;
        let Some(centroid) = centroids.get(&k) else {
            continue;
        };
        let class_boxes: Vec<&BBox> = boxes.iter().filter(|(_, c)| *c == k).map(|(b, _)| b).collect();
        for p in live {
            if owners[&fm.index(p.y, p.x)] > 1 {
                continue;
            }
            let cos = cosine_similarity(fm.feature(p.y, p.x), centroid);
            if cos.zero_norm || cos.value <= cfg.tau1 {
                continue;
            }
            match best_centerness(p.y, p.x, &class_boxes) {
                Some(c) if c > cfg.tau2 => refs.push(p),
                _ => {}
            }
        }
    }

    let mut features = Matrix::zeros(refs.len(), fm.channels());
    for (n, r) in refs.iter().enumerate() {
        features.row_mut(n).copy_from_slice(fm.feature(r.y, r.x));
    }
    Ok(PixelSet {
        refs,
        features,
        domain: Domain::Source,
    })
}

/// Most cosine-similar live row of `pool` to `query`, lowest index on ties.
fn nearest_live(query: &[f64], pool: &Matrix) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for j in 0..pool.rows() {
        let c = cosine_similarity(query, pool.row(j));
        if c.zero_norm {
            continue;
        }
        match best {
            Some((_, b)) if c.value <= b => {}
            _ => best = Some((j, c.value)),
        }
    }
    best
}

/// Cross-domain correspondence search. For source pixel `i` of class `k`
/// with target nearest neighbour `j'`, the pair is kept when the source
/// nearest neighbour of `j'` also has class `k`. A target pixel claimed by
/// several sources keeps the most similar one.
pub fn mutual_nn_match(src: &PixelSet, tgt_fm: &FeatureMap) -> Result<(MatchedPairs, PixelSet)> {
    if src.domain != Domain::Source {
        return Err(FgrrError::Precondition("matching expects a source pixel set".into()));
    }
    if src.features.cols() != tgt_fm.channels() && !src.is_empty() {
        return Err(FgrrError::Shape(format!(
            "source features have {} channels, target map {}",
            src.features.cols(),
            tgt_fm.channels()
        )));
    }
    let labels = src.labels();
    if src.refs.iter().any(|r| r.label.is_none()) {
        return Err(FgrrError::Precondition("source pixels must be labelled".into()));
    }
    let tgt = tgt_fm.pixels();
    let mut back_cache: BTreeMap<usize, Option<usize>> = BTreeMap::new();
    // target pixel -> (source row, class, cosine)
    let mut claims: BTreeMap<usize, (usize, usize, f64)> = BTreeMap::new();
    for i in 0..src.len() {
        let Some((j, cos)) = nearest_live(src.features.row(i), tgt) else {
            continue;
        };
        let back = *back_cache
            .entry(j)
            .or_insert_with(|| nearest_live(tgt.row(j), &src.features).map(|(b, _)| b));
        let Some(back) = back else {
            continue;
        };
        if labels[back] != labels[i] {
            continue;
        }
        match claims.get(&j) {
            Some(&(_, _, prev)) if cos <= prev => {}
            _ => {
                claims.insert(j, (i, labels[i], cos));
            }
        }
    }

    let w = tgt_fm.width();
    let pairs: Vec<MatchedPair> = claims
        .iter()
        .map(|(&j, &(i, k, _))| MatchedPair {
            source: i,
            target: j,
            class: k,
        })
        .collect();
    let mut features = Matrix::zeros(pairs.len(), tgt_fm.channels());
    let refs = pairs
        .iter()
        .enumerate()
        .map(|(n, p)| {
            features.row_mut(n).copy_from_slice(tgt.row(p.target));
            PixelRef {
                y: p.target / w,
                x: p.target % w,
                label: Some(p.class),
            }
        })
        .collect();
    Ok((
        MatchedPairs { pairs },
        PixelSet {
            refs,
            features,
            domain: Domain::Target,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Stage;
    use fgrr_oracle::{exhaustive_mutual_nn, formulas};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, rows: Vec<Vec<f64>>) -> FeatureMap {
        FeatureMap::from_pixels(Stage::Shallow, h, w, Matrix::from_rows(&rows).unwrap()).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
        let rows = (0..h * w).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        map(h, w, rows)
    }

    #[test]
    fn centroid_of_singletons_and_pairs() {
        let fm = map(1, 3, vec![vec![0.0, 0.0], vec![2.0, 4.0], vec![7.0, -1.0]]);
        let px = |x, k| PixelRef { y: 0, x, label: Some(k) };
        let c = class_centroids(&fm, &[px(0, 1), px(1, 1), px(2, 2)]).unwrap();
        assert_eq!(c[&1], vec![1.0, 2.0]);
        assert_eq!(c[&2], vec![7.0, -1.0]);
        assert!(class_centroids(&fm, &[]).unwrap().is_empty());
        assert!(class_centroids(&fm, &[PixelRef { y: 0, x: 0, label: None }]).is_err());
    }

    #[test]
    fn centroid_matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let fm = random_map(&mut rng, 5, 6, 4);
            let pixels: Vec<PixelRef> = (0..20)
                .map(|_| PixelRef {
                    y: rng.gen_range(0..5),
                    x: rng.gen_range(0..6),
                    label: Some(rng.gen_range(1..4)),
                })
                .collect();
            let fast = class_centroids(&fm, &pixels).unwrap();
            let feats: Vec<Vec<f64>> = pixels.iter().map(|p| fm.feature(p.y, p.x).to_vec()).collect();
            let labels: Vec<usize> = pixels.iter().map(|p| p.label.unwrap()).collect();
            let slow = formulas::class_means(&feats, &labels);
            assert_eq!(fast.keys().collect::<Vec<_>>(), slow.keys().collect::<Vec<_>>());
            for (k, v) in &fast {
                for (a, b) in v.iter().zip(&slow[k]) {
                    assert!(fgrr_oracle::relative_error(*a, *b) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn vacuous_thresholds_select_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fm = random_map(&mut rng, 8, 8, 3);
        let b = BBox::new(1.0, 2.0, 5.0, 6.0).unwrap();
        let cfg = PixelSelectionConfig { tau1: -0.999999, tau2: 0.0 };
        let set = select_source_foreground(&fm, &[(b, 1)], &cfg).unwrap();
        // centres 1.5..4.5 by 2.5..5.5: 4 x 4 strictly interior pixels
        assert_eq!(set.len(), 16);
        assert!(set.refs.iter().all(|r| r.label == Some(1)));
    }

    #[test]
    fn tau1_of_one_selects_nothing_for_non_collinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fm = random_map(&mut rng, 8, 8, 3);
        let b = BBox::new(0.0, 0.0, 8.0, 8.0).unwrap();
        let cfg = PixelSelectionConfig { tau1: 1.0, tau2: 0.0 };
        assert!(select_source_foreground(&fm, &[(b, 1)], &cfg).unwrap().is_empty());
    }

    #[test]
    fn background_pixels_inside_box_are_filtered() {
        // 3x3 box; the 4 corner-adjacent cross pixels are background
        let mut rows = vec![vec![0.0, 1.0]; 9];
        for p in [0, 2, 6, 8] {
            rows[p] = vec![1.0, 0.0];
        }
        rows[4] = vec![1.0, 0.0];
        let fm = map(3, 3, rows);
        let b = BBox::new(0.0, 0.0, 3.0, 3.0).unwrap();
        let cfg = PixelSelectionConfig { tau1: 0.5, tau2: 0.0 };
        let set = select_source_foreground(&fm, &[(b, 1)], &cfg).unwrap();
        // centroid (5/9, 4/9): cos to (1,0) = 0.781, cos to (0,1) = 0.625;
        // both pass tau1 = 0.5, so tighten to separate them.
        assert_eq!(set.len(), 9);
        let cfg = PixelSelectionConfig { tau1: 0.7, tau2: 0.0 };
        let set = select_source_foreground(&fm, &[(b, 1)], &cfg).unwrap();
        let xs: Vec<(usize, usize)> = set.refs.iter().map(|r| (r.y, r.x)).collect();
        assert_eq!(xs, vec![(0, 0), (0, 2), (1, 1), (2, 0), (2, 2)]);
    }

    #[test]
    fn four_object_five_background_agrees_with_oracle() {
        // With 4 object and 5 background pixels the centroid leans toward
        // background; every pixel stays above tau1 = 0.5.
        let mut rows = vec![vec![0.0, 1.0]; 9];
        for p in [0, 2, 6, 8] {
            rows[p] = vec![1.0, 0.0];
        }
        let fm = map(3, 3, rows.clone());
        let b = BBox::new(0.0, 0.0, 3.0, 3.0).unwrap();
        let cfg = PixelSelectionConfig { tau1: 0.5, tau2: 0.0 };
        let got: Vec<usize> = select_source_foreground(&fm, &[(b, 1)], &cfg)
            .unwrap()
            .linear_indices(3);

        let centroid = &formulas::class_means(&rows, &[1; 9])[&1];
        let expected: Vec<usize> = (0..9)
            .filter(|&p| {
                let (px, py) = ((p % 3) as f64 + 0.5, (p / 3) as f64 + 0.5);
                formulas::cosine(&rows[p], centroid) > 0.5
                    && formulas::centerness(px, 3.0 - px, py, 3.0 - py) > 0.0
            })
            .collect();
        assert_eq!(got, expected);
        assert_eq!(got.len(), 9);
    }

    #[test]
    fn dead_pixels_and_shared_pixels_are_not_foreground() {
        let mut rows = vec![vec![1.0, 1.0]; 4];
        rows[0] = vec![0.0, 0.0];
        let fm = map(2, 2, rows);
        let cfg = PixelSelectionConfig { tau1: -0.5, tau2: 0.0 };
        let whole = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let set = select_source_foreground(&fm, &[(whole, 1)], &cfg).unwrap();
        assert_eq!(set.len(), 3);
        let right = BBox::new(1.0, 0.0, 2.0, 2.0).unwrap();
        let set = select_source_foreground(&fm, &[(whole, 1), (right, 2)], &cfg).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!((set.refs[0].y, set.refs[0].x), (1, 0));
    }

    #[test]
    fn single_identical_target_pixel_matches() {
        let src = PixelSet {
            refs: vec![PixelRef { y: 0, x: 0, label: Some(2) }],
            features: Matrix::from_rows(&[vec![0.3, 0.9]]).unwrap(),
            domain: Domain::Source,
        };
        let tgt = map(1, 3, vec![vec![1.0, 0.0], vec![0.3, 0.9], vec![-1.0, 0.1]]);
        let (pairs, set) = mutual_nn_match(&src, &tgt).unwrap();
        assert_eq!(pairs.pairs, vec![MatchedPair { source: 0, target: 1, class: 2 }]);
        assert_eq!(set.refs[0], PixelRef { y: 0, x: 1, label: Some(2) });
        assert_eq!(set.features.row(0), &[0.3, 0.9]);
    }

    #[test]
    fn disagreeing_back_match_is_dropped() {
        // class-2 pixel's target NN maps back to the class-1 pixel
        let src = PixelSet {
            refs: vec![
                PixelRef { y: 0, x: 0, label: Some(1) },
                PixelRef { y: 0, x: 1, label: Some(2) },
            ],
            features: Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.2]]).unwrap(),
            domain: Domain::Source,
        };
        let tgt = map(1, 2, vec![vec![1.0, 0.05], vec![-1.0, 1.0]]);
        let (pairs, _) = mutual_nn_match(&src, &tgt).unwrap();
        assert_eq!(pairs.pairs, vec![MatchedPair { source: 0, target: 0, class: 1 }]);
        let oracle = exhaustive_mutual_nn(&src.features.to_rows(), &src.labels(), &tgt.pixels().to_rows()).unwrap();
        assert_eq!(oracle.into_iter().collect::<Vec<_>>(), vec![(0, 0, 1)]);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let src = PixelSet {
            refs: vec![PixelRef { y: 0, x: 0, label: Some(1) }],
            features: Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            domain: Domain::Source,
        };
        let tgt = map(1, 3, vec![vec![0.0, 1.0], vec![2.0, 0.0], vec![2.0, 0.0]]);
        let (pairs, _) = mutual_nn_match(&src, &tgt).unwrap();
        assert_eq!(pairs.pairs[0].target, 1);
    }

    #[test]
    fn empty_source_gives_empty_outputs() {
        let tgt = map(1, 1, vec![vec![1.0]]);
        let (pairs, set) = mutual_nn_match(&PixelSet::empty(Domain::Source, 1), &tgt).unwrap();
        assert!(pairs.is_empty() && set.is_empty());
    }

    #[test]
    fn matching_agrees_with_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let c = rng.gen_range(1..=8);
            let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
            let tgt = random_map(&mut rng, h, w, c);
            let n = rng.gen_range(0..40);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let refs = (0..n).map(|i| PixelRef { y: i, x: 0, label: Some(rng.gen_range(1..=3)) }).collect();
            let src = PixelSet {
                refs,
                features: if n == 0 { Matrix::zeros(0, c) } else { Matrix::from_rows(&rows).unwrap() },
                domain: Domain::Source,
            };
            let (pairs, set) = mutual_nn_match(&src, &tgt).unwrap();
            let fast: std::collections::BTreeSet<_> = pairs.pairs.iter().map(|p| (p.source, p.target, p.class)).collect();
            let slow = exhaustive_mutual_nn(&rows, &src.labels(), &tgt.pixels().to_rows()).unwrap();
            assert_eq!(fast, slow);
            let mut targets: Vec<usize> = pairs.pairs.iter().map(|p| p.target).collect();
            targets.dedup();
            assert_eq!(targets.len(), set.len());
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(200))]
        #[test]
        fn raising_thresholds_never_adds_pixels(
            seed in 0u64..10_000,
            t1 in -0.9f64..0.9,
            d1 in 0.0f64..0.5,
            t2 in 0.0f64..0.9,
            d2 in 0.0f64..0.5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fm = random_map(&mut rng, 10, 10, 3);
            let boxes: Vec<(BBox, usize)> = (0..3)
                .map(|_| {
                    let (x, y) = (rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0));
                    let b = BBox::new(x, y, x + rng.gen_range(1.0..4.0), y + rng.gen_range(1.0..4.0)).unwrap();
                    (b, rng.gen_range(1..=2))
                })
                .collect();
            let lo = PixelSelectionConfig { tau1: t1, tau2: t2 };
            let hi = PixelSelectionConfig { tau1: (t1 + d1).min(1.0), tau2: (t2 + d2).min(1.0) };
            let a = select_source_foreground(&fm, &boxes, &lo).unwrap();
            let b = select_source_foreground(&fm, &boxes, &hi).unwrap();
            for r in &b.refs {
                proptest::prop_assert!(a.refs.contains(r));
            }
        }
    }
}

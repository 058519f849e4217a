//! Evaluation measures: mask overlap, clustering agreement, keypoint accuracy
//! and landmark regression from part centroids.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::descriptor_store::{pixel_to_patch, FieldMeta};
use crate::error::{Error, Result};
use crate::mask::LabelMask;

fn check_shape(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::DimMismatch {
            expected: b.len(),
            actual: a.len(),
        });
    }
    Ok(())
}

/// Intersection over union of the non-zero cells. Two empty masks score 1.
pub fn jaccard(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    check_shape(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of cells whose foreground/background state agrees.
pub fn precision_px(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    check_shape(pred, gt)?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty masks".into()));
    }
    let agree = pred
        .labels()
        .iter()
        .zip(gt.labels())
        .filter(|(&p, &g)| (p != 0) == (g != 0))
        .count();
    Ok(agree as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterAgreement {
    pub nmi: f64,
    pub ari: f64,
}

fn dense_ids(labels: &[u32]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    let dense = labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(*l).or_insert(next)
        })
        .collect();
    (dense, ids.len())
}

fn choose2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// NMI (arithmetic-mean normalization) and adjusted Rand index.
///
/// With `foreground_only`, samples whose ground-truth label is 0 are dropped.
pub fn nmi_ari(pred: &[u32], gt: &[u32], foreground_only: bool) -> Result<ClusterAgreement> {
    if pred.len() != gt.len() {
        return Err(Error::DimMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    let (pred, gt): (Vec<u32>, Vec<u32>) = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| !foreground_only || g != 0)
        .map(|(&p, &g)| (p, g))
        .unzip();
    if pred.is_empty() {
        return Err(Error::InvalidArgument("no samples to compare".into()));
    }
    let n = pred.len() as f64;
    let (pi, np) = dense_ids(&pred);
    let (gi, ng) = dense_ids(&gt);
    let mut table = vec![0.0f64; np * ng];
    for (&a, &b) in pi.iter().zip(&gi) {
        table[a * ng + b] += 1.0;
    }
    let row: Vec<f64> = (0..np).map(|a| table[a * ng..(a + 1) * ng].iter().sum()).collect();
    let col: Vec<f64> = (0..ng).map(|b| (0..np).map(|a| table[a * ng + b]).sum()).collect();

    let entropy = |counts: &[f64]| -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| -(c / n) * (c / n).ln())
            .sum()
    };
    let mut mi = 0.0;
    for a in 0..np {
        for b in 0..ng {
            let c = table[a * ng + b];
            if c > 0.0 {
                mi += (c / n) * (n * c / (row[a] * col[b])).ln();
            }
        }
    }
    let (hp, hg) = (entropy(&row), entropy(&col));
    let nmi = if hp == 0.0 && hg == 0.0 {
        1.0
    } else {
        (mi / ((hp + hg) / 2.0)).clamp(0.0, 1.0)
    };

    let index: f64 = table.iter().map(|&c| choose2(c)).sum();
    let sum_a: f64 = row.iter().map(|&c| choose2(c)).sum();
    let sum_b: f64 = col.iter().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(n).max(f64::MIN_POSITIVE);
    let max_index = (sum_a + sum_b) / 2.0;
    let ari = if max_index == expected {
        1.0
    } else {
        (index - expected) / (max_index - expected)
    };
    Ok(ClusterAgreement { nmi, ari })
}

/// Labels of a patch-grid mask at pixel locations.
pub fn labels_at(mask: &LabelMask, meta: &FieldMeta, points: &[(f64, f64)]) -> Result<Vec<u32>> {
    points
        .iter()
        .map(|&(y, x)| pixel_to_patch(y, x, meta).map(|(r, c)| mask.get(r, c)))
        .collect()
}

/// Percentage of keypoints within `alpha * max(h, w)` of the ground truth.
pub fn pck(
    pred: &[(f64, f64)],
    gt: &[(f64, f64)],
    alpha: f64,
    image_h: usize,
    image_w: usize,
) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::DimMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be positive".into()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("no keypoints".into()));
    }
    let radius = alpha * image_h.max(image_w) as f64;
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| (p.0 - g.0).hypot(p.1 - g.1) <= radius)
        .count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Maps mask cells to image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellGeometry {
    pub image_h: f64,
    pub image_w: f64,
    pub patch_size: f64,
    pub stride: f64,
}

impl CellGeometry {
    pub fn from_meta(meta: &FieldMeta) -> Self {
        Self {
            image_h: meta.image_height_px as f64,
            image_w: meta.image_width_px as f64,
            patch_size: meta.patch_size_px as f64,
            stride: meta.stride_px as f64,
        }
    }

    /// Every mask cell is one pixel.
    pub fn pixels(height: usize, width: usize) -> Self {
        Self {
            image_h: height as f64,
            image_w: width as f64,
            patch_size: 1.0,
            stride: 1.0,
        }
    }

    /// Centre of `(row, col)` normalized to `[0, 1]^2`.
    fn normalized_center(&self, row: usize, col: usize) -> (f64, f64) {
        let half = (self.patch_size - 1.0) / 2.0;
        (
            (row as f64 * self.stride + half) / self.image_h,
            (col as f64 * self.stride + half) / self.image_w,
        )
    }
}

/// One image's part mask and its normalized ground-truth landmarks.
#[derive(Debug, Clone)]
pub struct PartObservation {
    pub mask: LabelMask,
    pub geometry: CellGeometry,
    pub landmarks: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRegression {
    /// Mean L2 error in normalized coordinates, times 100.
    pub error: f64,
    pub ridge_used: bool,
}

pub const RIDGE_LAMBDA: f64 = 1e-4;

/// Normalized centroid of every part `1..=num_parts`; an absent part falls
/// back to the mean over all cells.
pub fn part_centroids(obs: &PartObservation, num_parts: usize) -> Vec<f64> {
    let mut sums = vec![(0.0, 0.0, 0usize); num_parts + 1];
    let (mut all_y, mut all_x) = (0.0, 0.0);
    for r in 0..obs.mask.height() {
        for c in 0..obs.mask.width() {
            let (y, x) = obs.geometry.normalized_center(r, c);
            all_y += y;
            all_x += x;
            let l = obs.mask.get(r, c) as usize;
            if (1..=num_parts).contains(&l) {
                sums[l].0 += y;
                sums[l].1 += x;
                sums[l].2 += 1;
            }
        }
    }
    let n = obs.mask.len().max(1) as f64;
    let fallback = (all_y / n, all_x / n);
    (1..=num_parts)
        .flat_map(|p| {
            let (sy, sx, cnt) = sums[p];
            if cnt == 0 {
                [fallback.0, fallback.1]
            } else {
                [sy / cnt as f64, sx / cnt as f64]
            }
        })
        .collect()
}

/// Fits a linear map (with intercept) from part centroids to landmarks on
/// the train split and reports the mean landmark error on the test split.
pub fn landmark_regression_error(
    observations: &[PartObservation],
    num_parts: usize,
    train: &[usize],
    test: &[usize],
) -> Result<LandmarkRegression> {
    if num_parts == 0 || train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument(
            "landmark regression needs parts and non-empty splits".into(),
        ));
    }
    let n_landmarks = observations
        .first()
        .map(|o| o.landmarks.len())
        .ok_or_else(|| Error::InvalidArgument("no observations".into()))?;
    if n_landmarks == 0 || observations.iter().any(|o| o.landmarks.len() != n_landmarks) {
        return Err(Error::InvalidArgument("inconsistent landmark counts".into()));
    }
    if let Some(&bad) = train.iter().chain(test).find(|&&i| i >= observations.len()) {
        return Err(Error::OutOfRange(format!("split index {bad}")));
    }

    let p = 2 * num_parts;
    let q = 2 * n_landmarks;
    let features = |idx: &[usize]| {
        DMatrix::from_row_iterator(
            idx.len(),
            p,
            idx.iter().flat_map(|&i| part_centroids(&observations[i], num_parts)),
        )
    };
    let targets = |idx: &[usize]| {
        DMatrix::from_row_iterator(
            idx.len(),
            q,
            idx.iter()
                .flat_map(|&i| observations[i].landmarks.iter().flat_map(|&(y, x)| [y, x])),
        )
    };

    let x = features(train);
    let y = targets(train);
    let x_mean = x.row_mean();
    let y_mean = y.row_mean();
    let mut xc = x.clone();
    let mut yc = y.clone();
    for mut r in xc.row_iter_mut() {
        r -= &x_mean;
    }
    for mut r in yc.row_iter_mut() {
        r -= &y_mean;
    }

    let svals = xc.clone().svd(false, false).singular_values;
    let smax = svals.iter().cloned().fold(0.0, f64::max);
    let tol = smax * (train.len().max(p) as f64) * f64::EPSILON;
    let rank = svals.iter().filter(|&&s| s > tol && s > 0.0).count();

    let xtx = xc.transpose() * &xc;
    let xty = xc.transpose() * &yc;
    let mut ridge_used = rank < p;
    let solve = |m: DMatrix<f64>| m.cholesky().map(|c| c.solve(&xty));
    let coef = if ridge_used {
        None
    } else {
        solve(xtx.clone())
    };
    let coef = match coef {
        Some(c) => c,
        None => {
            ridge_used = true;
            solve(&xtx + DMatrix::identity(p, p) * RIDGE_LAMBDA)
                .ok_or_else(|| Error::Numerical("ridge system not positive definite".into()))?
        }
    };

    let xt = features(test);
    let yt = targets(test);
    let mut total = 0.0;
    for i in 0..test.len() {
        let centered = xt.row(i) - &x_mean;
        let pred = centered * &coef + &y_mean;
        for l in 0..n_landmarks {
            let dy = pred[2 * l] - yt[(i, 2 * l)];
            let dx = pred[2 * l + 1] - yt[(i, 2 * l + 1)];
            total += dy.hypot(dx);
        }
    }
    let error = 100.0 * total / (test.len() * n_landmarks) as f64;
    if !error.is_finite() {
        return Err(Error::Numerical("non-finite landmark error".into()));
    }
    Ok(LandmarkRegression { error, ridge_used })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn mask(h: usize, w: usize, v: &[u32]) -> LabelMask {
        LabelMask::new("m", h, w, v.to_vec()).unwrap()
    }

    /// ARI by counting agreeing pairs directly.
    fn ari_by_pairs(a: &[u32], b: &[u32]) -> f64 {
        let n = a.len();
        let (mut both, mut only_a, mut only_b, mut neither) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                match (a[i] == a[j], b[i] == b[j]) {
                    (true, true) => both += 1.0,
                    (true, false) => only_a += 1.0,
                    (false, true) => only_b += 1.0,
                    (false, false) => neither += 1.0,
                }
            }
        }
        let total: f64 = both + only_a + only_b + neither;
        let expected = (both + only_a) * (both + only_b) / total;
        let max = ((both + only_a) + (both + only_b)) / 2.0;
        (both - expected) / (max - expected)
    }

    /// NMI from joint and marginal probabilities enumerated per label value.
    fn nmi_by_probabilities(a: &[u32], b: &[u32]) -> f64 {
        let n = a.len() as f64;
        let la: std::collections::BTreeSet<_> = a.iter().collect();
        let lb: std::collections::BTreeSet<_> = b.iter().collect();
        let pa = |x: u32| a.iter().filter(|&&v| v == x).count() as f64 / n;
        let pb = |y: u32| b.iter().filter(|&&v| v == y).count() as f64 / n;
        let mut mi = 0.0;
        for &&x in &la {
            for &&y in &lb {
                let pxy = a.iter().zip(b).filter(|(&u, &v)| u == x && v == y).count() as f64 / n;
                if pxy > 0.0 {
                    mi += pxy * (pxy / (pa(x) * pb(y))).ln();
                }
            }
        }
        let ha: f64 = la.iter().map(|&&x| -pa(x) * pa(x).ln()).sum();
        let hb: f64 = lb.iter().map(|&&y| -pb(y) * pb(y).ln()).sum();
        mi / ((ha + hb) / 2.0)
    }

    #[test]
    fn jaccard_examples() {
        let m = mask(2, 2, &[1, 0, 1, 1]);
        assert_eq!(jaccard(&m, &m).unwrap(), 1.0);
        assert_eq!(jaccard(&mask(2, 2, &[1, 1, 0, 0]), &mask(2, 2, &[0, 0, 1, 1])).unwrap(), 0.0);
        let top_row = mask(2, 2, &[1, 1, 0, 0]);
        let left_col = mask(2, 2, &[1, 0, 1, 0]);
        assert!((jaccard(&top_row, &left_col).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&mask(1, 2, &[0, 0]), &mask(1, 2, &[0, 0])).unwrap(), 1.0);
        assert!(jaccard(&mask(1, 2, &[0, 0]), &mask(2, 1, &[0, 0])).is_err());
    }

    #[test]
    fn precision_examples() {
        let gt = mask(2, 2, &[1, 0, 1, 0]);
        assert_eq!(precision_px(&gt, &gt).unwrap(), 1.0);
        assert_eq!(precision_px(&mask(2, 2, &[0, 1, 0, 1]), &gt).unwrap(), 0.0);
        assert_eq!(precision_px(&mask(2, 2, &[1, 0, 1, 1]), &gt).unwrap(), 0.75);
    }

    #[test]
    fn nmi_ari_examples() {
        let gt = [0, 0, 1, 1, 2, 2];
        let relabeled = [2, 2, 0, 0, 1, 1];
        let r = nmi_ari(&relabeled, &gt, false).unwrap();
        assert!((r.nmi - 1.0).abs() < 1e-12 && (r.ari - 1.0).abs() < 1e-12);

        let r = nmi_ari(&[7; 6], &gt, false).unwrap();
        assert!(r.nmi.abs() < 1e-12 && r.ari.abs() < 1e-12);

        let pred = [0, 0, 1, 1, 2, 2];
        let gt = [0, 0, 1, 1, 1, 2];
        let r = nmi_ari(&pred, &gt, false).unwrap();
        let nmi_oracle = nmi_by_probabilities(&pred, &gt);
        let ari_oracle = ari_by_pairs(&pred, &gt);
        assert!((r.nmi - nmi_oracle).abs() < 1e-9);
        assert!((r.ari - ari_oracle).abs() < 1e-9);
        // Pair counts: both=3, only_pred=0, only_gt=1 of 15 pairs => ARI 4/9.
        assert!((r.ari - 4.0 / 9.0).abs() < 1e-9);
        assert!((r.nmi - 0.739_667_376_800_759_2).abs() < 1e-9);
    }

    #[test]
    fn foreground_only_drops_background() {
        let pred = [5, 0, 1, 1, 2];
        let gt = [0, 0, 1, 1, 2];
        let all = nmi_ari(&pred, &gt, false).unwrap();
        let fg = nmi_ari(&pred, &gt, true).unwrap();
        assert!(all.nmi < 1.0);
        assert!((fg.nmi - 1.0).abs() < 1e-12 && (fg.ari - 1.0).abs() < 1e-12);
        assert!(nmi_ari(&[1, 2], &[0, 0], true).is_err());
        assert!(nmi_ari(&[1], &[0, 0], false).is_err());
    }

    #[test]
    fn pck_examples() {
        let gt = vec![(50.0, 50.0); 4];
        assert_eq!(pck(&gt, &gt, 0.1, 100, 100).unwrap(), 100.0);
        let pred = vec![(55.0, 50.0), (50.0, 60.0), (60.01, 50.0), (50.0, 20.0)];
        assert_eq!(pck(&pred, &gt, 0.1, 100, 100).unwrap(), 50.0);
        let far = vec![(0.0, 0.0); 4];
        assert_eq!(pck(&far, &gt, 0.1, 100, 100).unwrap(), 0.0);
        assert!(pck(&far[..3], &gt, 0.1, 100, 100).is_err());
        assert!(pck(&far, &gt, 0.0, 100, 100).is_err());
    }

    fn blob_mask(h: usize, w: usize, blobs: &[(usize, usize, u32)]) -> LabelMask {
        let mut m = LabelMask::filled("m", h, w, 0);
        for &(r, c, part) in blobs {
            for dr in 0..2 {
                for dc in 0..2 {
                    m.labels_mut()[(r + dr) * w + c + dc] = part;
                }
            }
        }
        m
    }

    #[test]
    fn landmark_equal_to_part_centroid_has_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs: Vec<_> = (0..12)
            .map(|_| {
                let (r, c) = (rng.random_range(0..14), rng.random_range(0..14));
                let m = blob_mask(16, 16, &[(r, c, 1)]);
                let geometry = CellGeometry::pixels(16, 16);
                let o = PartObservation { mask: m, geometry, landmarks: vec![] };
                let cent = part_centroids(&o, 1);
                PartObservation { landmarks: vec![(cent[0], cent[1])], ..o }
            })
            .collect();
        let res = landmark_regression_error(&obs, 1, &(0..8).collect::<Vec<_>>(), &[8, 9, 10, 11]).unwrap();
        assert!(res.error < 1e-6, "{res:?}");
        assert!(!res.ridge_used);
    }

    #[test]
    fn constant_landmarks_fit_by_intercept() {
        let obs: Vec<_> = (0..6)
            .map(|i| PartObservation {
                // Identical masks make the design rank deficient.
                mask: blob_mask(8, 8, &[(i % 2, 3, 1), (5, 5, 2)]),
                geometry: CellGeometry::pixels(8, 8),
                landmarks: vec![(0.25, 0.75), (0.5, 0.5)],
            })
            .collect();
        let res = landmark_regression_error(&obs, 3, &[0, 1, 2, 3], &[4, 5]).unwrap();
        assert!(res.error < 1e-9, "{res:?}");
        assert!(res.ridge_used);
    }

    #[test]
    fn landmark_error_tracks_noise_level() {
        // Landmarks are an affine map of the part centroid plus N(0, sigma^2)
        // noise on the vertical coordinate, so the expected L2 error is
        // sigma * E|N(0,1)| up to the estimation error of the fit.
        let sigma = 0.02;
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 300;
        let mut mean_err = 0.0;
        for _ in 0..trials {
            let obs: Vec<_> = (0..20)
                .map(|_| {
                    let (r, c) = (rng.random_range(0..30), rng.random_range(0..30));
                    let o = PartObservation {
                        mask: blob_mask(32, 32, &[(r, c, 1)]),
                        geometry: CellGeometry::pixels(32, 32),
                        landmarks: vec![],
                    };
                    let cent = part_centroids(&o, 1);
                    let ly = 0.1 + 0.5 * cent[0] + 0.2 * cent[1] + noise.sample(&mut rng);
                    let lx = 0.3 - 0.4 * cent[0] + 0.6 * cent[1];
                    PartObservation { landmarks: vec![(ly, lx)], ..o }
                })
                .collect();
            let train: Vec<usize> = (0..16).collect();
            mean_err += landmark_regression_error(&obs, 1, &train, &[16, 17, 18, 19]).unwrap().error;
        }
        mean_err /= trials as f64;
        let expected = 100.0 * sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean_err - expected).abs() / expected < 0.2, "{mean_err} vs {expected}");
    }

    #[test]
    fn absent_part_falls_back_to_image_mean() {
        let o = PartObservation {
            mask: LabelMask::filled("m", 4, 4, 0),
            geometry: CellGeometry::pixels(4, 4),
            landmarks: vec![],
        };
        assert_eq!(part_centroids(&o, 1), vec![1.5 / 4.0, 1.5 / 4.0]);
    }

    proptest! {
        #[test]
        fn nmi_ari_bounded_and_relabel_invariant(
            pairs in proptest::collection::vec((0u32..4, 0u32..4), 2..40),
            shift in 1u32..5,
        ) {
            let (p, g): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
            let r = nmi_ari(&p, &g, false).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.nmi));
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&r.ari));
            let relabeled: Vec<u32> = p.iter().map(|&l| (l + shift) % 4 + 10).collect();
            let s = nmi_ari(&relabeled, &g, false).unwrap();
            prop_assert!((r.nmi - s.nmi).abs() < 1e-12);
            prop_assert!((r.ari - s.ari).abs() < 1e-12);
        }

        #[test]
        fn mask_metrics_symmetric_and_bounded(
            bits in proptest::collection::vec((0u32..2, 0u32..2), 1..30),
        ) {
            let (a, b): (Vec<u32>, Vec<u32>) = bits.into_iter().unzip();
            let n = a.len();
            let (ma, mb) = (mask(1, n, &a), mask(1, n, &b));
            let j = jaccard(&ma, &mb).unwrap();
            prop_assert_eq!(j, jaccard(&mb, &ma).unwrap());
            prop_assert!((0.0..=1.0).contains(&j));
            let p = precision_px(&ma, &mb).unwrap();
            prop_assert_eq!(p, precision_px(&mb, &ma).unwrap());
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn pck_monotone_in_alpha(
            pts in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0), 1..20),
            a in 0.01f64..0.5,
            da in 0.0f64..0.5,
        ) {
            let pred: Vec<_> = pts.iter().map(|p| (p.0, p.1)).collect();
            let gt: Vec<_> = pts.iter().map(|p| (p.2, p.3)).collect();
            let lo = pck(&pred, &gt, a, 100, 80).unwrap();
            let hi = pck(&pred, &gt, a + da, 100, 80).unwrap();
            prop_assert!(lo <= hi);
            prop_assert!((0.0..=100.0).contains(&hi));
        }
    }
}

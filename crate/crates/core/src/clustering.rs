//! k-means over descriptor bags.
//!
//! Lloyd iterations with k-means++ seeding drawn from a ChaCha stream, so a
//! `(matrix, k, seed)` triple always yields the same model. Assignment runs
//! in parallel over rows and the centroid update in parallel over clusters;
//! every reduction walks rows in index order, which keeps results bitwise
//! identical for any thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::descriptor_store::{DescriptorField, DescriptorMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// L2-normalize rows before clustering (and before assignment).
    pub normalize: bool,
    /// Independent seedings; the lowest-inertia run wins.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 2,
            seed: 0,
            max_iters: 100,
            tol: 1e-4,
            normalize: true,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    /// One label per matrix row.
    pub labels: Vec<u32>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    /// Inertia after every assignment pass, starting with the seeding.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub normalized: bool,
}

impl ClusterModel {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Nearest centroid for each row of `rows` (row-major, `dim` wide).
    pub fn assign_rows(&self, rows: &[f32]) -> Result<Vec<u32>> {
        if rows.len() % self.dim != 0 {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: rows.len() % self.dim,
            });
        }
        let data = prepare_rows(rows, self.dim, self.normalized);
        Ok(assign_all(&data, self.dim, &self.centroids, self.k)
            .into_iter()
            .map(|(l, _)| l)
            .collect())
    }

    /// Cluster labels recorded during training for one stacked source.
    pub fn training_labels(&self, matrix: &DescriptorMatrix, source: usize) -> Result<LabelMask> {
        if self.labels.len() != matrix.rows() {
            return Err(Error::DimMismatch {
                expected: matrix.rows(),
                actual: self.labels.len(),
            });
        }
        let info = matrix
            .sources()
            .get(source)
            .ok_or_else(|| Error::OutOfRange(format!("source {source}")))?;
        let mut mask = LabelMask::filled(info.image_id.clone(), info.grid_h, info.grid_w, 0);
        let width = info.grid_w;
        for (p, &label) in matrix.provenance().iter().zip(&self.labels) {
            if p.source == source {
                mask.labels_mut()[p.row * width + p.col] = label;
            }
        }
        Ok(mask)
    }
}

/// Labels every cell of `field` with its nearest centroid.
pub fn assign(model: &ClusterModel, field: &DescriptorField) -> Result<LabelMask> {
    if field.dim() != model.dim {
        return Err(Error::DimMismatch {
            expected: model.dim,
            actual: field.dim(),
        });
    }
    let labels = model.assign_rows(field.data())?;
    LabelMask::new(field.meta().image_id.clone(), field.grid_h(), field.grid_w(), labels)
}

pub fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn prepare_rows(rows: &[f32], dim: usize, normalize: bool) -> Vec<f64> {
    let mut data: Vec<f64> = rows.iter().map(|&v| v as f64).collect();
    if normalize {
        data.par_chunks_mut(dim).for_each(l2_normalize);
    }
    data
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[f64], k: usize) -> (u32, f64) {
    let dim = x.len();
    let mut best = (0u32, f64::INFINITY);
    for j in 0..k {
        let d = sq_dist(x, &centroids[j * dim..(j + 1) * dim]);
        if d < best.1 {
            best = (j as u32, d);
        }
    }
    best
}

fn assign_all(data: &[f64], dim: usize, centroids: &[f64], k: usize) -> Vec<(u32, f64)> {
    data.par_chunks(dim)
        .map(|x| nearest(x, centroids, k))
        .collect()
}

fn working_rows(matrix: &DescriptorMatrix, normalize: bool) -> Vec<f64> {
    prepare_rows(matrix.data(), matrix.dim(), normalize)
}

fn plus_plus_init(data: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(k * dim);

    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(row(first));
    let mut min_d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();

    for _ in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in min_d2.iter().enumerate() {
                if w > 0.0 {
                    acc += w;
                    pick = Some(i);
                    if acc > target {
                        break;
                    }
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Every remaining row coincides with a centre already chosen.
            chosen.iter().position(|c| !c).expect("k <= n")
        };
        chosen[pick] = true;
        centroids.extend_from_slice(row(pick));
        for (i, d) in min_d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), row(pick)));
        }
    }
    centroids
}

/// Moves each empty centroid onto the row farthest from its own centroid,
/// drawn from clusters that can spare a member.
fn reseed_empty(
    data: &[f64],
    dim: usize,
    centroids: &mut [f64],
    assignment: &mut [(u32, f64)],
    k: usize,
) {
    let mut counts = vec![0usize; k];
    for &(l, _) in assignment.iter() {
        counts[l as usize] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, &(l, d)) in assignment.iter().enumerate() {
            if counts[l as usize] >= 2 && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let Some((i, _)) = best else { break };
        counts[assignment[i].0 as usize] -= 1;
        counts[j] = 1;
        assignment[i] = (j as u32, 0.0);
        centroids[j * dim..(j + 1) * dim].copy_from_slice(&data[i * dim..(i + 1) * dim]);
    }
}

fn update_centroids(
    data: &[f64],
    dim: usize,
    old: &[f64],
    assignment: &[(u32, f64)],
    k: usize,
) -> Vec<f64> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &(l, _)) in assignment.iter().enumerate() {
        members[l as usize].push(i);
    }
    let means: Vec<Vec<f64>> = members
        .par_iter()
        .enumerate()
        .map(|(j, rows)| {
            if rows.is_empty() {
                return old[j * dim..(j + 1) * dim].to_vec();
            }
            let mut sum = vec![0.0; dim];
            for &i in rows {
                for (s, v) in sum.iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
                    *s += v;
                }
            }
            let n = rows.len() as f64;
            sum.iter_mut().for_each(|s| *s /= n);
            sum
        })
        .collect();
    means.concat()
}

fn inertia_of(assignment: &[(u32, f64)]) -> f64 {
    assignment.iter().map(|&(_, d)| d).sum()
}

fn validate(matrix: &DescriptorMatrix, k: usize) -> Result<()> {
    if matrix.is_empty() {
        return Err(Error::InvalidArgument("empty descriptor matrix".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if k > matrix.rows() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds {} rows",
            matrix.rows()
        )));
    }
    Ok(())
}

fn lloyd(data: &[f64], dim: usize, cfg: &KMeansConfig, seed: u64) -> ClusterModel {
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, dim, k, &mut rng);
    let mut assignment = assign_all(data, dim, &centroids, k);
    let mut history = vec![inertia_of(&assignment)];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iters {
        iterations += 1;
        reseed_empty(data, dim, &mut centroids, &mut assignment, k);
        let next = update_centroids(data, dim, &centroids, &assignment, k);
        let shift = (0..k)
            .map(|j| sq_dist(&centroids[j * dim..(j + 1) * dim], &next[j * dim..(j + 1) * dim]).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        assignment = assign_all(data, dim, &centroids, k);
        history.push(inertia_of(&assignment));
        if shift < cfg.tol {
            converged = true;
            break;
        }
    }

    ClusterModel {
        k,
        dim,
        centroids,
        labels: assignment.iter().map(|&(l, _)| l).collect(),
        inertia: inertia_of(&assignment),
        inertia_history: history,
        iterations,
        converged,
        normalized: cfg.normalize,
    }
}

/// Lloyd's k-means with k-means++ seeding.
pub fn kmeans(matrix: &DescriptorMatrix, cfg: &KMeansConfig) -> Result<ClusterModel> {
    validate(matrix, cfg.k)?;
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidArgument("tol must be positive".into()));
    }
    let dim = matrix.dim();
    let data = working_rows(matrix, cfg.normalize);
    let mut best: Option<ClusterModel> = None;
    for r in 0..cfg.restarts.max(1) {
        let model = lloyd(&data, dim, cfg, cfg.seed.wrapping_add(r as u64));
        if !model.inertia.is_finite() {
            return Err(Error::Numerical("non-finite inertia".into()));
        }
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElbowConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub drop_threshold: f64,
}

impl Default for ElbowConfig {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 12,
            drop_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowResult {
    pub k: usize,
    /// `(k, inertia)` for every k that was fitted.
    pub inertias: Vec<(usize, f64)>,
}

/// Picks the smallest k whose relative inertia gain from k to k+1 falls below
/// `drop_threshold`, or `k_max` when none does.
pub fn elbow_select_k(
    matrix: &DescriptorMatrix,
    elbow: &ElbowConfig,
    base: &KMeansConfig,
) -> Result<ElbowResult> {
    if elbow.k_min < 1 || elbow.k_min >= elbow.k_max || elbow.k_max > matrix.rows() {
        return Err(Error::InvalidArgument(format!(
            "elbow range [{}, {}] invalid for {} rows",
            elbow.k_min,
            elbow.k_max,
            matrix.rows()
        )));
    }
    let mut inertias = Vec::new();
    let mut prev: Option<f64> = None;
    for k in elbow.k_min..=elbow.k_max {
        let cfg = KMeansConfig { k, ..base.clone() };
        let inertia = kmeans(matrix, &cfg)?.inertia;
        inertias.push((k, inertia));
        if let Some(p) = prev {
            let gain = if p > 0.0 { (p - inertia) / p } else { 0.0 };
            if gain < elbow.drop_threshold {
                return Ok(ElbowResult { k: k - 1, inertias });
            }
        }
        prev = Some(inertia);
    }
    Ok(ElbowResult {
        k: elbow.k_max,
        inertias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> DescriptorMatrix {
        DescriptorMatrix::from_rows(2, vec![0.0, 0.0, 0.0, 1.0, 10.0, 0.0, 10.0, 1.0]).unwrap()
    }

    fn raw(k: usize) -> KMeansConfig {
        KMeansConfig {
            k,
            normalize: false,
            ..Default::default()
        }
    }

    /// Minimum inertia over every 2-partition, by enumeration.
    fn brute_force_two_partition(points: &[[f64; 2]]) -> (f64, Vec<u32>) {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << n) - 1 {
            let labels: Vec<u32> = (0..n).map(|i| (mask >> i) & 1).collect();
            let mut sse = 0.0;
            for c in 0..2 {
                let members: Vec<_> = (0..n).filter(|&i| labels[i] == c).collect();
                let m = members.len() as f64;
                let cy = members.iter().map(|&i| points[i][0]).sum::<f64>() / m;
                let cx = members.iter().map(|&i| points[i][1]).sum::<f64>() / m;
                sse += members
                    .iter()
                    .map(|&i| (points[i][0] - cy).powi(2) + (points[i][1] - cx).powi(2))
                    .sum::<f64>();
            }
            if sse < best.0 {
                best = (sse, labels);
            }
        }
        best
    }

    fn same_partition(a: &[u32], b: &[u32]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn toy_set_matches_brute_force() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let (opt, labels) = brute_force_two_partition(&pts);
        assert_eq!(opt, 1.0);
        let model = kmeans(&toy(), &raw(2)).unwrap();
        assert!(same_partition(&model.labels, &labels));
        assert!((model.inertia - opt).abs() < 1e-12);
        let mut cents: Vec<_> = (0..2).map(|j| model.centroid(j).to_vec()).collect();
        cents.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cents, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
    }

    #[test]
    fn exact_fit_when_k_equals_n() {
        let m = DescriptorMatrix::from_rows(2, vec![0.0, 0.0, 1.0, 2.0, -3.0, 4.0, 5.0, 5.0, 2.0, -1.0]).unwrap();
        let model = kmeans(&m, &raw(5)).unwrap();
        assert_eq!(model.inertia, 0.0);
        let mut labels = model.labels.clone();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 5);
    }

    #[test]
    fn single_cluster_is_global_mean() {
        let m = toy();
        let model = kmeans(&m, &raw(1)).unwrap();
        assert_eq!(model.centroid(0), &[5.0, 0.5]);
        // N * total variance = sum of squared deviations from the mean.
        assert!((model.inertia - (4.0 * 25.0 + 4.0 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_k() {
        assert!(kmeans(&toy(), &raw(0)).is_err());
        assert!(kmeans(&toy(), &raw(5)).is_err());
        let mut cfg = raw(2);
        cfg.tol = 0.0;
        assert!(kmeans(&toy(), &cfg).is_err());
    }

    #[test]
    fn assign_exact_and_uniform() {
        let model = kmeans(&toy(), &raw(2)).unwrap();
        let rows: Vec<f32> = (0..2).flat_map(|j| model.centroid(j).iter().map(|&v| v as f32).collect::<Vec<_>>()).collect();
        assert_eq!(model.assign_rows(&rows).unwrap(), vec![0, 1]);
        assert_eq!(model.assign_rows(&[10.0, 0.4, 10.0, 0.4, 10.0, 0.4]).unwrap().iter().collect::<std::collections::HashSet<_>>().len(), 1);
        assert_eq!(model.assign_rows(toy().data()).unwrap(), model.labels);
        assert!(model.assign_rows(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let data: Vec<f32> = (0..200).map(|i| ((i * 37 % 101) as f32).sin()).collect();
        let m = DescriptorMatrix::from_rows(4, data).unwrap();
        let cfg = KMeansConfig { k: 5, seed: 9, ..Default::default() };
        assert_eq!(kmeans(&m, &cfg).unwrap(), kmeans(&m, &cfg).unwrap());
    }

    #[test]
    fn inertia_never_increases() {
        let data: Vec<f32> = (0..600).map(|i| ((i * 7919 % 613) as f32 / 613.0) - 0.5).collect();
        let m = DescriptorMatrix::from_rows(3, data).unwrap();
        for seed in 0..10 {
            let model = kmeans(&m, &KMeansConfig { k: 6, seed, normalize: false, ..Default::default() }).unwrap();
            for w in model.inertia_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", model.inertia_history);
            }
        }
    }

    #[test]
    fn permutation_invariant_partition() {
        let pts = vec![0.0f32, 0.0, 0.2, 0.1, 5.0, 5.0, 5.1, 4.9, -4.0, 6.0, -4.2, 6.1];
        let m = DescriptorMatrix::from_rows(2, pts.clone()).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted: Vec<f32> = perm.iter().flat_map(|&i| pts[2 * i..2 * i + 2].to_vec()).collect();
        let mp = DescriptorMatrix::from_rows(2, permuted).unwrap();
        let a = kmeans(&m, &raw(3)).unwrap();
        let b = kmeans(&mp, &raw(3)).unwrap();
        let b_back: Vec<u32> = (0..6).map(|i| b.labels[perm.iter().position(|&p| p == i).unwrap()]).collect();
        assert!(same_partition(&a.labels, &b_back));
    }

    #[test]
    fn elbow_picks_three_blobs() {
        // Each blob is centre +/- eps along every axis of a 16-d space. Its
        // covariance is isotropic, so no split of a blob can remove more
        // than 1/16 of its inertia, while merging blobs costs far more.
        let dim = 16;
        let eps = 0.01f32;
        let centres = [0.0f32, 10.0, 20.0];
        let mut data = Vec::new();
        for &c in &centres {
            for axis in 0..dim {
                for sign in [-1.0f32, 1.0] {
                    let mut v = vec![0.0f32; dim];
                    v[0] = c;
                    v[axis] += sign * eps;
                    data.extend(v);
                }
            }
        }
        let m = DescriptorMatrix::from_rows(dim, data).unwrap();
        let elbow = ElbowConfig { k_min: 1, k_max: 6, drop_threshold: 0.05 };
        let base = KMeansConfig { normalize: false, ..Default::default() };
        let res = elbow_select_k(&m, &elbow, &base).unwrap();
        assert_eq!(res.k, 3);
        // Direct computation: each blob contributes 2 * dim * eps^2.
        let direct = 3.0 * 2.0 * dim as f64 * (eps as f64).powi(2);
        let at3 = res.inertias.iter().find(|(k, _)| *k == 3).unwrap().1;
        assert!((at3 - direct).abs() < 1e-6, "{at3} vs {direct}");
    }

    #[test]
    fn elbow_degenerate_and_threshold_zero() {
        let m = DescriptorMatrix::from_rows(2, [1.0f32, 2.0].repeat(6)).unwrap();
        let base = KMeansConfig { normalize: false, ..Default::default() };
        let e = ElbowConfig { k_min: 1, k_max: 3, drop_threshold: 0.05 };
        assert_eq!(elbow_select_k(&m, &e, &base).unwrap().k, 1);
        let e0 = ElbowConfig { k_min: 1, k_max: 3, drop_threshold: 0.0 };
        assert_eq!(elbow_select_k(&m, &e0, &base).unwrap().k, 3);
        let bad = ElbowConfig { k_min: 3, k_max: 3, drop_threshold: 0.05 };
        assert!(elbow_select_k(&m, &bad, &base).is_err());
    }

    #[test]
    fn empty_clusters_are_reseeded() {
        // Duplicated rows force coincident seeds.
        let m = DescriptorMatrix::from_rows(1, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0]).unwrap();
        let model = kmeans(&m, &raw(3)).unwrap();
        assert!(model.labels.iter().all(|&l| l < 3));
        let expected_min = 0.0;
        assert!(model.inertia >= expected_min);
        assert_eq!(model.cluster_sizes().iter().sum::<usize>(), 6);
    }
}

//! Pseudo-domain discovery: k-means (Lloyd with k-means++ seeding), the
//! visual-word codebook over non-tumor style features, per-WSI bag-of-
//! visual-words histograms, and clustering of WSIs into pseudo-domains.
//!
//! Distances are squared Euclidean throughout. Nearest-centroid ties break
//! toward the lowest centroid index.

use crate::error::{Error, Result};
use crate::patch::Label;
use crate::scalar::Scalar;
use crate::seeding::{derive_seed, rng_from};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

fn sq_dist<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Index of the nearest centroid; ties break toward the lowest index.
fn nearest<T: Scalar>(point: ArrayView1<T>, centroids: &Array2<T>) -> (usize, T) {
    let mut best = 0;
    let mut best_d = sq_dist(point, centroids.row(0));
    for c in 1..centroids.nrows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    (best, best_d)
}

#[derive(Debug, Clone)]
pub struct KMeansResult<T: Scalar> {
    pub centroids: Array2<T>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances of every point to its centroid.
    pub objective: T,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct KMeansOpts {
    pub max_iter: usize,
    /// Independent k-means++ seedings; the best objective wins.
    pub restarts: usize,
}

impl Default for KMeansOpts {
    fn default() -> Self {
        KMeansOpts {
            max_iter: 100,
            restarts: 16,
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding and multiple restarts.
pub fn kmeans<T: Scalar>(points: ArrayView2<T>, k: usize, seed: u64) -> Result<KMeansResult<T>> {
    kmeans_with(points, k, seed, &KMeansOpts::default())
}

pub fn kmeans_with<T: Scalar>(
    points: ArrayView2<T>,
    k: usize,
    seed: u64,
    opts: &KMeansOpts,
) -> Result<KMeansResult<T>> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds point count {n}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("k-means input contains non-finite values"));
    }

    let mut best: Option<KMeansResult<T>> = None;
    for restart in 0..opts.restarts.max(1) {
        let run = lloyd(points, k, derive_seed(seed, "kmeans-restart", restart as u64), opts);
        let better = best
            .as_ref()
            .map_or(true, |b| run.objective < b.objective);
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd<T: Scalar>(points: ArrayView2<T>, k: usize, seed: u64, opts: &KMeansOpts) -> KMeansResult<T> {
    let n = points.nrows();
    let mut rng = rng_from(seed);
    let mut centroids = plus_plus_seed(points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut distances = vec![T::zero(); n];
    let mut prev_objective = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let mut changed = false;
        for i in 0..n {
            let (c, d) = nearest(points.row(i), &centroids);
            if assignments[i] != c {
                changed = true;
            }
            assignments[i] = c;
            distances[i] = d;
        }

        // Empty clusters are re-seeded from the point farthest from its
        // centroid (among clusters that keep at least one other member).
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let farthest = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| distances[a].partial_cmp(&distances[b]).unwrap())
                .expect("k <= n guarantees a donor point");
            counts[assignments[farthest]] -= 1;
            counts[c] += 1;
            assignments[farthest] = c;
            distances[farthest] = T::zero();
            changed = true;
        }

        let dim = points.ncols();
        let mut sums = Array2::<T>::zeros((k, dim));
        for i in 0..n {
            let mut row = sums.row_mut(assignments[i]);
            row += &points.row(i);
        }
        for c in 0..k {
            let count = T::from_usize(counts[c]).unwrap();
            let mut row = sums.row_mut(c);
            row.mapv_inplace(|v| v / count);
        }
        centroids = sums;

        let objective: T = (0..n)
            .map(|i| sq_dist(points.row(i), centroids.row(assignments[i])))
            .sum();
        let obj = objective.to_f64().unwrap();
        assert!(
            obj <= prev_objective * (1.0 + 1e-9) + 1e-12,
            "k-means objective increased: {prev_objective} -> {obj}"
        );
        prev_objective = obj;

        if !changed {
            converged = true;
            break;
        }
    }

    let objective: T = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(assignments[i])))
        .sum();
    KMeansResult {
        centroids,
        assignments,
        objective,
        converged,
        iterations,
    }
}

/// k-means++: first centroid uniform, then D^2-weighted draws.
fn plus_plus_seed<T: Scalar>(
    points: ArrayView2<T>,
    k: usize,
    rng: &mut impl Rng,
) -> Array2<T> {
    let n = points.nrows();
    let dim = points.ncols();
    let mut centroids = Array2::<T>::zeros((k, dim));
    let mut chosen = vec![false; n];

    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    chosen[first] = true;

    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(0)).to_f64().unwrap())
        .collect();

    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut threshold = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                threshold -= w;
                if threshold <= 0.0 && !chosen[i] {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| (0..n).rev().find(|&i| !chosen[i]).unwrap())
        } else {
            // All remaining mass is on duplicates; take any unchosen point.
            (0..n).find(|&i| !chosen[i]).unwrap()
        };
        centroids.row_mut(c).assign(&points.row(pick));
        chosen[pick] = true;
        for i in 0..n {
            let d = sq_dist(points.row(i), centroids.row(c)).to_f64().unwrap();
            d2[i] = d2[i].min(d);
        }
    }
    centroids
}

/// Visual-word centroids in style-feature space.
#[derive(Debug, Clone)]
pub struct Codebook<T: Scalar> {
    centroids: Array2<T>,
}

impl<T: Scalar> Codebook<T> {
    /// Validates that centroids are pairwise distinct.
    pub fn new(centroids: Array2<T>) -> Result<Self> {
        for a in 0..centroids.nrows() {
            for b in (a + 1)..centroids.nrows() {
                if sq_dist(centroids.row(a), centroids.row(b)) == T::zero() {
                    return Err(Error::invalid(format!(
                        "codebook centroids {a} and {b} coincide"
                    )));
                }
            }
        }
        Ok(Codebook { centroids })
    }

    pub fn k1(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn centroids(&self) -> ArrayView2<'_, T> {
        self.centroids.view()
    }

    /// Nearest visual word, ties toward the lowest index.
    pub fn assign(&self, feature: ArrayView1<T>) -> usize {
        nearest(feature, &self.centroids).0
    }
}

/// Fit the visual-word codebook on style features of non-tumor patches.
/// Tumor features are a precondition violation, not a silent filter.
pub fn fit_codebook<T: Scalar>(
    features: ArrayView2<T>,
    labels: &[Label],
    k1: usize,
    seed: u64,
) -> Result<Codebook<T>> {
    if features.nrows() != labels.len() {
        return Err(Error::invalid(format!(
            "feature count {} != label count {}",
            features.nrows(),
            labels.len()
        )));
    }
    if let Some(i) = labels.iter().position(|&l| l != 0) {
        return Err(Error::invalid(format!(
            "fit_codebook requires non-tumor features only; found label {} at row {i}",
            labels[i]
        )));
    }
    if features.nrows() < k1 {
        return Err(Error::invalid(format!(
            "need at least K1 = {k1} features, got {}",
            features.nrows()
        )));
    }
    let result = kmeans(features, k1, seed)?;
    Codebook::new(result.centroids)
}

/// Normalized visual-word histogram of one WSI's non-tumor patches.
#[derive(Debug, Clone, PartialEq)]
pub struct BovwVector<T: Scalar> {
    pub wsi_id: String,
    pub histogram: Array1<T>,
}

pub fn bovw_vector<T: Scalar>(
    wsi_id: &str,
    features: ArrayView2<T>,
    codebook: &Codebook<T>,
) -> Result<BovwVector<T>> {
    if features.nrows() == 0 {
        return Err(Error::UngroupableWsi {
            wsi_id: wsi_id.to_string(),
        });
    }
    let mut counts = vec![0usize; codebook.k1()];
    for row in features.rows() {
        counts[codebook.assign(row)] += 1;
    }
    let total = T::from_usize(features.nrows()).unwrap();
    let histogram = Array1::from_iter(
        counts
            .iter()
            .map(|&c| T::from_usize(c).unwrap() / total),
    );
    Ok(BovwVector {
        wsi_id: wsi_id.to_string(),
        histogram,
    })
}

/// Persisted pseudo-domain assignment, with the seeds that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoDomainAssignment {
    pub assignments: BTreeMap<String, usize>,
    pub k: usize,
    pub k1: usize,
    pub codebook_seed: u64,
    pub cluster_seed: u64,
}

impl PseudoDomainAssignment {
    pub fn cluster_of(&self, wsi_id: &str) -> Option<usize> {
        self.assignments.get(wsi_id).copied()
    }
}

/// Cluster WSIs by their BoVW vectors into `k` pseudo-domains.
pub fn cluster_wsis<T: Scalar>(
    vectors: &[BovwVector<T>],
    k: usize,
    seed: u64,
) -> Result<PseudoDomainAssignment> {
    if vectors.is_empty() {
        return Err(Error::invalid("no BoVW vectors to cluster"));
    }
    if vectors.len() < k {
        return Err(Error::invalid(format!(
            "cannot form K = {k} pseudo-domains from {} WSIs",
            vectors.len()
        )));
    }
    let k1 = vectors[0].histogram.len();
    if vectors.iter().any(|v| v.histogram.len() != k1) {
        return Err(Error::invalid("BoVW vectors have inconsistent lengths"));
    }
    let mut points = Array2::<T>::zeros((vectors.len(), k1));
    for (i, v) in vectors.iter().enumerate() {
        points.row_mut(i).assign(&v.histogram);
    }
    let result = kmeans(points.view(), k, seed)?;
    let assignments = vectors
        .iter()
        .zip(&result.assignments)
        .map(|(v, &c)| (v.wsi_id.clone(), c))
        .collect();
    Ok(PseudoDomainAssignment {
        assignments,
        k,
        k1,
        codebook_seed: 0,
        cluster_seed: seed,
    })
}

/// One row per centroid, plain numeric CSV.
pub fn save_codebook_csv<T: Scalar>(codebook: &Codebook<T>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in codebook.centroids().rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{}", v.to_f64().unwrap())).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_codebook_csv<T: Scalar>(path: &Path) -> Result<Codebook<T>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<T>, _> = line
            .split(',')
            .map(|cell| cell.trim().parse::<f64>().map(T::from_f64_c))
            .collect();
        rows.push(row.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", lineno + 1),
        })?);
    }
    if rows.is_empty() {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            message: "empty codebook".to_string(),
        });
    }
    let dim = rows[0].len();
    let mut centroids = Array2::<T>::zeros((rows.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                message: format!("row {i} has {} cells, expected {dim}", row.len()),
            });
        }
        for (j, &v) in row.iter().enumerate() {
            centroids[[i, j]] = v;
        }
    }
    Codebook::new(centroids)
}

/// One row per WSI: `wsi_id,h_0,...,h_{K1-1}`.
pub fn save_bovw_csv<T: Scalar>(vectors: &[BovwVector<T>], path: &Path) -> Result<()> {
    let mut out = String::new();
    for v in vectors {
        out.push_str(&v.wsi_id);
        for h in v.histogram.iter() {
            out.push(',');
            out.push_str(&format!("{}", h.to_f64().unwrap()));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn save_assignment_json(assignment: &PseudoDomainAssignment, path: &Path) -> Result<()> {
    let json =
        serde_json::to_string_pretty(assignment).map_err(|e| Error::json(path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_assignment_json(path: &Path) -> Result<PseudoDomainAssignment> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn well_separated_pairs_in_one_dimension() {
        let points = array![[0.0f64], [1.0], [10.0], [11.0]];
        let r = kmeans(points.view(), 2, 0).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        let mut centers: Vec<f64> = r.centroids.column(0).to_vec();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_abs_diff_eq!(centers[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(centers[1], 10.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.objective, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn k_equals_n_reaches_zero_objective() {
        let points = array![[0.0f64, 0.0], [3.0, 1.0], [5.0, -2.0], [9.0, 4.0]];
        let r = kmeans(points.view(), 4, 1).unwrap();
        assert_eq!(r.objective, 0.0);
        let mut seen = r.assignments.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn k_larger_than_n_rejected() {
        let points = array![[0.0f64], [1.0]];
        assert!(kmeans(points.view(), 3, 0).is_err());
    }

    /// Exhaustive 2-partition oracle for tiny instances.
    pub fn brute_force_two_means(points: &Array2<f64>) -> f64 {
        let n = points.nrows();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << (n - 1)) {
            let cost: f64 = [false, true]
                .iter()
                .map(|&side| {
                    let members: Vec<usize> = (0..n)
                        .filter(|&i| (mask >> i & 1 == 1) == side)
                        .collect();
                    if members.is_empty() {
                        return f64::INFINITY;
                    }
                    let dim = points.ncols();
                    let mut mean = vec![0.0; dim];
                    for &i in &members {
                        for j in 0..dim {
                            mean[j] += points[[i, j]];
                        }
                    }
                    for m in &mut mean {
                        *m /= members.len() as f64;
                    }
                    members
                        .iter()
                        .map(|&i| {
                            (0..dim)
                                .map(|j| (points[[i, j]] - mean[j]).powi(2))
                                .sum::<f64>()
                        })
                        .sum()
                })
                .sum();
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn matches_exhaustive_optimum_on_micro_instances() {
        let mut rng = rng_from(99);
        for case in 0..20 {
            let n = rng.gen_range(2..=8);
            let dim = rng.gen_range(1..=3);
            let mut points = Array2::<f64>::zeros((n, dim));
            for v in points.iter_mut() {
                *v = rng.gen_range(-5.0..5.0);
            }
            let r = kmeans(points.view(), 2, case).unwrap();
            let best = brute_force_two_means(&points);
            assert_abs_diff_eq!(r.objective, best, epsilon = 1e-9 * (1.0 + best));
        }
    }

    #[test]
    fn fixed_seed_reproduces_bit_identical_results() {
        let mut rng = rng_from(4);
        let mut points = Array2::<f32>::zeros((40, 5));
        for v in points.iter_mut() {
            *v = rng.gen_range(-1.0..1.0f32);
        }
        let a = kmeans(points.view(), 4, 7).unwrap();
        let b = kmeans(points.view(), 4, 7).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn codebook_rejects_tumor_features() {
        let feats = array![[0.0f64], [1.0], [2.0]];
        let err = fit_codebook(feats.view(), &[0, 1, 0], 2, 0);
        assert!(err.is_err());
    }

    #[test]
    fn k1_of_one_gives_feature_mean() {
        let feats = array![[1.0f64, 2.0], [3.0, 6.0], [5.0, 4.0]];
        let cb = fit_codebook(feats.view(), &[0, 0, 0], 1, 0).unwrap();
        assert_abs_diff_eq!(cb.centroids()[[0, 0]], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cb.centroids()[[0, 1]], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn codebook_recovers_separated_blobs() {
        let mut rng = rng_from(5);
        let blob_means = [[0.0f64, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let radius = 0.5;
        let mut feats = Array2::<f64>::zeros((60, 2));
        for i in 0..60 {
            let m = blob_means[i % 3];
            feats[[i, 0]] = m[0] + rng.gen_range(-radius..radius);
            feats[[i, 1]] = m[1] + rng.gen_range(-radius..radius);
        }
        let cb = fit_codebook(feats.view(), &vec![0; 60], 3, 3).unwrap();
        // Pair each blob mean with its nearest centroid.
        for m in &blob_means {
            let point = ndarray::arr1(m);
            let (_, d) = (0..3)
                .map(|c| {
                    let d = sq_dist(point.view(), cb.centroids().row(c));
                    (c, d)
                })
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            assert!(d.sqrt() < radius, "no centroid near blob mean {m:?}");
        }
    }

    #[test]
    fn histogram_counts_and_normalizes() {
        // Codebook at 0, 10, 20; features at 1, 2, 9, 21 -> words [0, 0, 1, 2].
        let cb = Codebook::new(array![[0.0f64], [10.0], [20.0]]).unwrap();
        let feats = array![[1.0f64], [2.0], [9.0], [21.0]];
        let v = bovw_vector("w", feats.view(), &cb).unwrap();
        assert_eq!(v.histogram.to_vec(), vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn degenerate_single_word_histogram() {
        let cb = Codebook::new(array![[0.0f64], [100.0]]).unwrap();
        let feats = array![[1.0f64], [2.0], [3.0]];
        let v = bovw_vector("w", feats.view(), &cb).unwrap();
        assert_eq!(v.histogram.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn histogram_is_order_invariant() {
        let cb = Codebook::new(array![[0.0f64], [10.0], [20.0]]).unwrap();
        let feats = array![[1.0f64], [9.0], [21.0], [2.0]];
        let permuted = array![[21.0f64], [2.0], [1.0], [9.0]];
        let a = bovw_vector("w", feats.view(), &cb).unwrap();
        let b = bovw_vector("w", permuted.view(), &cb).unwrap();
        assert_eq!(a.histogram, b.histogram);
    }

    #[test]
    fn zero_features_is_ungroupable() {
        let cb = Codebook::new(array![[0.0f64]]).unwrap();
        let feats = Array2::<f64>::zeros((0, 1));
        match bovw_vector("lonely", feats.view(), &cb) {
            Err(Error::UngroupableWsi { wsi_id }) => assert_eq!(wsi_id, "lonely"),
            other => panic!("expected UngroupableWsi, got {other:?}"),
        }
    }

    #[test]
    fn identical_vectors_cluster_exactly() {
        let mk = |id: &str, h: [f64; 2]| BovwVector {
            wsi_id: id.to_string(),
            histogram: Array1::from_vec(h.to_vec()),
        };
        let vectors = vec![
            mk("a", [1.0, 0.0]),
            mk("b", [1.0, 0.0]),
            mk("c", [0.0, 1.0]),
            mk("d", [0.0, 1.0]),
        ];
        let assignment = cluster_wsis(&vectors, 2, 0).unwrap();
        assert_eq!(assignment.cluster_of("a"), assignment.cluster_of("b"));
        assert_eq!(assignment.cluster_of("c"), assignment.cluster_of("d"));
        assert_ne!(assignment.cluster_of("a"), assignment.cluster_of("c"));
    }

    #[test]
    fn k_of_one_puts_everything_in_cluster_zero() {
        let vectors = vec![
            BovwVector { wsi_id: "a".into(), histogram: ndarray::arr1(&[0.3f64, 0.7]) },
            BovwVector { wsi_id: "b".into(), histogram: ndarray::arr1(&[0.6, 0.4]) },
        ];
        let assignment = cluster_wsis(&vectors, 1, 0).unwrap();
        assert!(assignment.assignments.values().all(|&c| c == 0));
    }

    #[test]
    fn more_clusters_than_wsis_rejected() {
        let vectors = vec![BovwVector {
            wsi_id: "a".into(),
            histogram: ndarray::arr1(&[1.0f64]),
        }];
        assert!(cluster_wsis(&vectors, 2, 0).is_err());
    }

    #[test]
    fn codebook_csv_round_trip() {
        let cb = Codebook::new(array![[0.125f32, -3.5], [7.25, 0.0]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codebook.csv");
        save_codebook_csv(&cb, &path).unwrap();
        let loaded: Codebook<f32> = load_codebook_csv(&path).unwrap();
        assert_eq!(loaded.centroids(), cb.centroids());
    }
}

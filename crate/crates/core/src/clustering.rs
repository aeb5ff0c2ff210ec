//! k-means++ seeding, Lloyd iterations, intrinsic validation indices and
//! cluster-count selection over a grid.
//!
//! Every reduction runs sequentially in row order over values computed in
//! parallel, so results for a given seed do not depend on the thread count.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::features::{FeatureError, Standardizer};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("no data")]
    EmptyData,
    #[error("k = {k} is invalid for {n} points")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("need at least 2 non-empty clusters")]
    SingleCluster,
    #[error("clusters {0} and {1} have coincident centroids")]
    CoincidentCentroids(usize, usize),
    #[error("need more points than clusters ({n} points, {k} clusters)")]
    TooFewPoints { n: usize, k: usize },
    #[error("k range {lo}..={hi} must lie within [2, {max}]")]
    InvalidKRange { lo: usize, hi: usize, max: usize },
    #[error("restarts must be at least 1")]
    NoRestarts,
    #[error("data contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

type Result<T> = std::result::Result<T, ClusterError>;

fn rows<'a>(x: &ArrayView2<'a, f64>) -> Vec<&'a [f64]> {
    let d = x.ncols().max(1);
    x.to_slice()
        .expect("data matrix must be in standard layout")
        .chunks(d)
        .collect()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Nearest centroid by squared distance; ties go to the lowest index.
fn nearest(point: &[f64], centroids: &[&[f64]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn check_data(x: &ArrayView2<'_, f64>) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(ClusterError::EmptyData);
    }
    if !x.is_standard_layout() {
        return Err(ClusterError::ShapeMismatch("data matrix must be row-major and contiguous".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ClusterError::NonFinite);
    }
    Ok(())
}

/// k-means++ seeding: the first centroid is a uniform draw, each later one
/// is drawn with probability proportional to its squared distance from the
/// nearest centroid chosen so far.
pub fn kmeanspp_seed(x: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<Array2<f64>> {
    check_data(&x)?;
    let n = x.nrows();
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if k > n {
        return Err(ClusterError::KTooLarge { k, n });
    }
    let data = rows(&x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = data.par_iter().map(|p| sq_dist(p, data[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every remaining point coincides with a chosen centroid
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(pick);
        let c = data[pick];
        d2.par_iter_mut().zip(data.par_iter()).for_each(|(d, p)| {
            *d = d.min(sq_dist(p, c));
        });
    }
    let d = x.ncols();
    Ok(Array2::from_shape_fn((k, d), |(i, j)| x[[chosen[i], j]]))
}

/// Outcome of one Lloyd run.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydFit {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step, ending with the final one.
    pub inertia_trace: Vec<f64>,
    pub converged: bool,
}

fn assign(data: &[&[f64]], centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let cview = centroids.view();
    let cs = rows(&cview);
    data.par_iter().map(|p| nearest(p, &cs)).unzip()
}

/// Lloyd's algorithm from the given initial centroids.
///
/// Stops once no centroid moves more than `tol` (Euclidean) or after
/// `max_iter` update steps. A cluster that empties out is re-seeded at the
/// point farthest from its assigned centroid.
pub fn lloyd(x: ArrayView2<'_, f64>, init: Array2<f64>, max_iter: usize, tol: f64) -> Result<LloydFit> {
    check_data(&x)?;
    let (n, d) = x.dim();
    let k = init.nrows();
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if init.ncols() != d {
        return Err(ClusterError::ShapeMismatch(format!(
            "centroids have {} columns, data has {d}",
            init.ncols()
        )));
    }
    if k > n {
        return Err(ClusterError::KTooLarge { k, n });
    }
    let data = rows(&x);
    let mut centroids = init.as_standard_layout().into_owned();
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        iterations += 1;
        let (mut labels, mut d2) = assign(&data, &centroids);
        trace.push(d2.iter().sum());

        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .fold(None::<usize>, |best, i| match best {
                    Some(b) if d2[b] >= d2[i] => Some(b),
                    _ => Some(i),
                });
            let Some(i) = far else { break };
            counts[labels[i]] -= 1;
            counts[j] = 1;
            labels[i] = j;
            d2[i] = 0.0;
            centroids.row_mut(j).assign(&x.row(i));
        }

        let mut sums = Array2::<f64>::zeros((k, d));
        for (i, &l) in labels.iter().enumerate() {
            let mut row = sums.row_mut(l);
            row += &x.row(i);
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let mean = sums.row(j).mapv(|v| v / counts[j] as f64);
            let moved = mean
                .iter()
                .zip(centroids.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            shift = shift.max(moved);
            centroids.row_mut(j).assign(&mean);
        }
        if shift <= tol {
            converged = true;
            break;
        }
    }

    let (assignments, d2) = assign(&data, &centroids);
    let inertia: f64 = d2.iter().sum();
    trace.push(inertia);
    Ok(LloydFit {
        centroids,
        assignments,
        inertia,
        iterations,
        inertia_trace: trace,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            restarts: 10,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// Best of `params.restarts` seeded k-means++ / Lloyd runs by inertia.
/// Restart `r` uses seed `derive_seed(seed, r)`; ties keep the earliest.
pub fn kmeans(x: ArrayView2<'_, f64>, k: usize, params: &KMeansParams, seed: u64) -> Result<LloydFit> {
    if params.restarts == 0 {
        return Err(ClusterError::NoRestarts);
    }
    let fits = (0..params.restarts)
        .into_par_iter()
        .map(|r| {
            let init = kmeanspp_seed(x, k, derive_seed(seed, r as u64))?;
            lloyd(x, init, params.max_iter, params.tol)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<LloydFit> = None;
    for fit in fits {
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// A fitted model, serializable as the model artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// Row-major centroids in standardized space.
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
    pub seed: u64,
    pub feature_layout: Vec<String>,
    pub standardizer: Standardizer,
    #[serde(default)]
    pub config_echo: serde_json::Value,
}

impl ClusterModel {
    pub fn from_fit(
        fit: &LloydFit,
        seed: u64,
        feature_layout: Vec<String>,
        standardizer: Standardizer,
        config_echo: serde_json::Value,
    ) -> Self {
        ClusterModel {
            k: fit.centroids.nrows(),
            centroids: fit.centroids.outer_iter().map(|r| r.to_vec()).collect(),
            inertia: fit.inertia,
            iterations: fit.iterations,
            seed,
            feature_layout,
            standardizer,
            config_echo,
        }
    }

    pub fn dim(&self) -> usize {
        self.standardizer.dim()
    }

    /// Nearest centroid for a vector already in standardized space.
    pub fn predict_standardized(&self, z: &[f64]) -> Result<usize> {
        if z.len() != self.dim() {
            return Err(ClusterError::DimensionMismatch {
                expected: self.dim(),
                found: z.len(),
            });
        }
        let cs: Vec<&[f64]> = self.centroids.iter().map(Vec::as_slice).collect();
        Ok(nearest(z, &cs).0)
    }

    /// Standardizes a raw feature vector and returns its nearest centroid.
    pub fn predict(&self, raw: &[f64]) -> Result<usize> {
        let z = self.standardizer.apply(raw)?;
        self.predict_standardized(&z)
    }

    /// Centroids mapped back to raw feature units.
    pub fn raw_centroids(&self) -> Result<Vec<Vec<f64>>> {
        self.centroids
            .iter()
            .map(|c| self.standardizer.invert(c).map_err(ClusterError::from))
            .collect()
    }
}

/// Relabels arbitrary cluster ids to `0..m` in order of first appearance.
fn compact_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        let next = map.len();
        out.push(*map.entry(l).or_insert(next));
    }
    (out, map.len())
}

fn check_labels(x: &ArrayView2<'_, f64>, labels: &[usize]) -> Result<(Vec<usize>, usize)> {
    check_data(x)?;
    if labels.len() != x.nrows() {
        return Err(ClusterError::ShapeMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            x.nrows()
        )));
    }
    let (compact, k) = compact_labels(labels);
    if k < 2 {
        return Err(ClusterError::SingleCluster);
    }
    Ok((compact, k))
}

fn cluster_means(data: &[&[f64]], labels: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let d = data[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in data.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    (sums, counts)
}

/// Mean silhouette coefficient (Euclidean distance). Points in singleton
/// clusters score 0, as do points with `a = b = 0`.
pub fn silhouette(x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let (labels, k) = check_labels(&x, labels)?;
    let data = rows(&x);
    let mut counts = vec![0usize; k];
    for &l in &labels {
        counts[l] += 1;
    }
    let scores: Vec<f64> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if counts[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for (j, q) in data.iter().enumerate() {
                if j != i {
                    sums[labels[j]] += dist(data[i], q);
                }
            }
            let a = sums[own] / (counts[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Silhouette on a seeded uniform subsample of at most `max_points` rows.
pub fn silhouette_sampled(x: ArrayView2<'_, f64>, labels: &[usize], max_points: usize, seed: u64) -> Result<f64> {
    let n = x.nrows();
    if max_points == 0 || n <= max_points {
        return silhouette(x, labels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, max_points).into_vec();
    idx.sort_unstable();
    let sub = x.select(ndarray::Axis(0), &idx);
    let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    silhouette(sub.view(), &sub_labels)
}

/// Davies-Bouldin index: mean over clusters of the worst
/// `(s_i + s_j) / d(c_i, c_j)`, with `s` the mean distance to the centroid.
pub fn davies_bouldin(x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let (labels, k) = check_labels(&x, labels)?;
    let data = rows(&x);
    let (centroids, counts) = cluster_means(&data, &labels, k);
    let mut spread = vec![0.0; k];
    for (p, &l) in data.iter().zip(&labels) {
        spread[l] += dist(p, &centroids[l]);
    }
    for (s, &c) in spread.iter_mut().zip(&counts) {
        *s /= c as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let sep = dist(&centroids[i], &centroids[j]);
            if sep == 0.0 {
                return Err(ClusterError::CoincidentCentroids(i.min(j), i.max(j)));
            }
            worst = worst.max((spread[i] + spread[j]) / sep);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Calinski-Harabasz index: between-cluster over within-cluster dispersion,
/// each divided by its degrees of freedom. A clustering with zero
/// within-cluster dispersion scores 1.0.
pub fn calinski_harabasz(x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let (labels, k) = check_labels(&x, labels)?;
    let n = x.nrows();
    if n <= k {
        return Err(ClusterError::TooFewPoints { n, k });
    }
    let data = rows(&x);
    let (centroids, counts) = cluster_means(&data, &labels, k);
    let (overall, _) = cluster_means(&data, &vec![0; n], 1);
    let between: f64 = centroids
        .iter()
        .zip(&counts)
        .map(|(c, &m)| m as f64 * sq_dist(c, &overall[0]))
        .sum();
    let within: f64 = data
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum();
    if within == 0.0 {
        return Ok(1.0);
    }
    Ok(between * (n - k) as f64 / (within * (k - 1) as f64))
}

/// Adjusted Rand Index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ClusterError::ShapeMismatch(format!("{} vs {} labels", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let (a, ka) = compact_labels(a);
    let (b, kb) = compact_labels(b);
    let mut table = vec![0u64; ka * kb];
    let mut rows_sum = vec![0u64; ka];
    let mut cols_sum = vec![0u64; kb];
    for (&i, &j) in a.iter().zip(&b) {
        table[i * kb + j] += 1;
        rows_sum[i] += 1;
        cols_sum[j] += 1;
    }
    let pairs = |m: u64| (m * m.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().map(|&m| pairs(m)).sum();
    let sum_a: f64 = rows_sum.iter().map(|&m| pairs(m)).sum();
    let sum_b: f64 = cols_sum.iter().map(|&m| pairs(m)).sum();
    let expected = sum_a * sum_b / pairs(n as u64);
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        // both partitions trivial (all-in-one or all-singletons)
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KScores {
    pub silhouette: f64,
    pub davies_bouldin: f64,
    pub calinski_harabasz: f64,
    pub inertia: f64,
}

/// Validation scores keyed by k.
pub type ValidationReport = BTreeMap<usize, KScores>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub kmeans: KMeansParams,
    /// Silhouette uses a seeded subsample beyond this many rows; 0 disables.
    pub silhouette_sample: usize,
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            kmeans: KMeansParams::default(),
            silhouette_sample: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub report: ValidationReport,
    /// Candidate k values, best first.
    pub ranking: Vec<usize>,
    pub fits: BTreeMap<usize, LloydFit>,
}

/// Seed used for the k-means restarts at a given k.
pub fn seed_for_k(seed: u64, k: usize) -> u64 {
    derive_seed(seed, k as u64)
}

const SILHOUETTE_STREAM: u64 = 0x5111_0ae7;

/// Grid search over `k_range`: fits the best-of-restarts model per k, scores
/// it with silhouette, Davies-Bouldin and Calinski-Harabasz, and ranks k by
/// mean rank across the three indices.
pub fn select_k(x: ArrayView2<'_, f64>, k_range: RangeInclusive<usize>, params: &SelectionParams, seed: u64) -> Result<Selection> {
    check_data(&x)?;
    let n = x.nrows();
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo < 2 || lo > hi || hi + 1 > n {
        return Err(ClusterError::InvalidKRange {
            lo,
            hi,
            max: n.saturating_sub(1),
        });
    }
    let mut report = ValidationReport::new();
    let mut fits = BTreeMap::new();
    for k in k_range {
        let fit = kmeans(x, k, &params.kmeans, seed_for_k(seed, k))?;
        let scores = KScores {
            silhouette: silhouette_sampled(
                x,
                &fit.assignments,
                params.silhouette_sample,
                derive_seed(seed, SILHOUETTE_STREAM),
            )?,
            davies_bouldin: davies_bouldin(x, &fit.assignments)?,
            calinski_harabasz: calinski_harabasz(x, &fit.assignments)?,
            inertia: fit.inertia,
        };
        report.insert(k, scores);
        fits.insert(k, fit);
    }
    let ranking = rank_by_indices(&report);
    Ok(Selection { report, ranking, fits })
}

/// Mean-rank aggregation: silhouette and Calinski-Harabasz descending,
/// Davies-Bouldin ascending. Ties go to the smaller k.
pub fn rank_by_indices(report: &ValidationReport) -> Vec<usize> {
    let ks: Vec<usize> = report.keys().copied().collect();
    let mut rank_sum: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let keys: [fn(&KScores) -> f64; 3] = [
        |s| -s.silhouette,
        |s| s.davies_bouldin,
        |s| -s.calinski_harabasz,
    ];
    for key in keys {
        let mut order = ks.clone();
        order.sort_by(|a, b| key(&report[a]).total_cmp(&key(&report[b])).then(a.cmp(b)));
        for (pos, k) in order.iter().enumerate() {
            *rank_sum.get_mut(k).unwrap() += pos + 1;
        }
    }
    let mut ranked = ks;
    ranked.sort_by_key(|k| (rank_sum[k], *k));
    ranked
}

/// Ranks k by an external score, highest first; missing or non-finite
/// scores go last. Ties go to the smaller k.
pub fn rank_by_score(scores: &BTreeMap<usize, Option<f64>>) -> Vec<usize> {
    let mut ks: Vec<usize> = scores.keys().copied().collect();
    let key = |k: &usize| scores[k].filter(|v| v.is_finite());
    ks.sort_by(|a, b| match (key(a), key(b)) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.cmp(b)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(b),
    });
    ks
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    fn blobs(centers: &[(f64, f64)], per: usize, sd: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sd).unwrap();
        let mut x = Array2::zeros((centers.len() * per, 2));
        let mut truth = Vec::new();
        for (c, &(cx, cy)) in centers.iter().enumerate() {
            for i in 0..per {
                let r = c * per + i;
                x[[r, 0]] = cx + normal.sample(&mut rng);
                x[[r, 1]] = cy + normal.sample(&mut rng);
                truth.push(c);
            }
        }
        (x, truth)
    }

    #[test]
    fn seeding_k_equals_n_is_permutation() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [1.0, 0.0], [9.0, 1.0]];
        for seed in 0..20 {
            let c = kmeanspp_seed(x.view(), 5, seed).unwrap();
            let mut got: Vec<Vec<u64>> = c.outer_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
            let mut want: Vec<Vec<u64>> = x.outer_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
            got.sort();
            want.sort();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn seeding_k_one_picks_a_row() {
        let (x, _) = blobs(&[(0.0, 0.0)], 20, 1.0, 3);
        let c = kmeanspp_seed(x.view(), 1, 42).unwrap();
        assert!(x.outer_iter().any(|r| r == c.row(0)));
    }

    #[test]
    fn seeding_splits_far_blobs() {
        let (x, _) = blobs(&[(0.0, 0.0), (1000.0, 1000.0)], 30, 1.0, 5);
        for seed in 0..200 {
            let c = kmeanspp_seed(x.view(), 2, seed).unwrap();
            let sides: Vec<bool> = c.outer_iter().map(|r| r[0] > 500.0).collect();
            assert_ne!(sides[0], sides[1], "seed {seed}");
        }
    }

    #[test]
    fn seeding_errors_and_determinism() {
        let x = array![[0.0], [1.0]];
        assert!(matches!(kmeanspp_seed(x.view(), 3, 0), Err(ClusterError::KTooLarge { k: 3, n: 2 })));
        assert!(matches!(kmeanspp_seed(x.view(), 0, 0), Err(ClusterError::ZeroK)));
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(kmeanspp_seed(empty.view(), 1, 0), Err(ClusterError::EmptyData)));
        let (x, _) = blobs(&[(0.0, 0.0), (5.0, 5.0), (9.0, 0.0)], 50, 1.0, 1);
        assert_eq!(kmeanspp_seed(x.view(), 3, 7).unwrap(), kmeanspp_seed(x.view(), 3, 7).unwrap());
    }

    #[test]
    fn lloyd_fixed_point() {
        let x = array![[0.0, 1.0], [4.0, 2.0], [7.0, 7.0]];
        let fit = lloyd(x.view(), x.clone(), 100, 1e-6).unwrap();
        assert_eq!(fit.inertia, 0.0);
        assert_eq!(fit.iterations, 1);
        assert_eq!(fit.assignments, vec![0, 1, 2]);
    }

    #[test]
    fn lloyd_symmetric_pairs() {
        let x = array![[0.0], [2.0], [10.0], [12.0]];
        let fit = lloyd(x.view(), array![[1.0], [11.0]], 100, 0.0).unwrap();
        assert_eq!(fit.centroids, array![[1.0], [11.0]]);
        assert_eq!(fit.inertia, 4.0);
        assert_eq!(fit.assignments, vec![0, 0, 1, 1]);
    }

    #[test]
    fn lloyd_shape_mismatch() {
        let x = array![[0.0, 1.0], [1.0, 1.0]];
        assert!(matches!(
            lloyd(x.view(), array![[0.0]], 10, 0.0),
            Err(ClusterError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn lloyd_repairs_empty_cluster() {
        // the second centroid starts far away from all data
        let x = array![[0.0], [1.0], [2.0], [10.0]];
        let fit = lloyd(x.view(), array![[1.0], [100.0]], 50, 0.0).unwrap();
        let mut counts = [0; 2];
        fit.assignments.iter().for_each(|&a| counts[a] += 1);
        assert!(counts.iter().all(|&c| c > 0));
        assert!(fit.inertia_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(fit.inertia, 2.0);
    }

    #[test]
    fn predict_rules() {
        let model = ClusterModel {
            k: 2,
            centroids: vec![vec![0.0, 0.0], vec![2.0, 0.0]],
            inertia: 0.0,
            iterations: 1,
            seed: 0,
            feature_layout: vec![],
            standardizer: Standardizer::identity(2),
            config_echo: serde_json::Value::Null,
        };
        assert_eq!(model.predict(&[2.0, 0.0]).unwrap(), 1);
        assert_eq!(model.predict(&[1.0, 5.0]).unwrap(), 0);
        assert!(matches!(model.predict(&[1.0]), Err(ClusterError::Feature(_))));
        assert!(matches!(
            model.predict_standardized(&[1.0]),
            Err(ClusterError::DimensionMismatch { .. })
        ));
        let scaled = ClusterModel {
            centroids: vec![vec![0.0, 0.0], vec![6.0, 0.0]],
            ..model.clone()
        };
        for x in [[0.4, 3.0], [1.7, -1.0], [2.2, 0.0]] {
            assert_eq!(model.predict(&x).unwrap(), scaled.predict(&[x[0] * 3.0, x[1] * 3.0]).unwrap());
        }
    }

    #[test]
    fn model_json_round_trip() {
        let (x, _) = blobs(&[(0.0, 0.0), (5.0, 5.0)], 10, 0.5, 2);
        let fit = kmeans(x.view(), 2, &KMeansParams::default(), 9).unwrap();
        let model = ClusterModel::from_fit(&fit, 9, vec!["a".into(), "b".into()], Standardizer::identity(2), serde_json::json!({"restarts": 10}));
        let text = serde_json::to_string(&model).unwrap();
        assert_eq!(serde_json::from_str::<ClusterModel>(&text).unwrap(), model);
    }

    #[test]
    fn index_examples() {
        let (x, truth) = blobs(&[(0.0, 0.0), (100.0, 100.0)], 25, 1.0, 11);
        assert!(silhouette(x.view(), &truth).unwrap() > 0.9);
        assert!(davies_bouldin(x.view(), &truth).unwrap() < 0.1);
        assert!(calinski_harabasz(x.view(), &truth).unwrap() > 100.0);

        let same = Array2::from_elem((6, 2), 3.0);
        assert_eq!(silhouette(same.view(), &[0, 1, 0, 1, 0, 1]).unwrap(), 0.0);
        assert!(matches!(
            davies_bouldin(same.view(), &[0, 1, 0, 1, 0, 1]),
            Err(ClusterError::CoincidentCentroids(0, 1))
        ));
        assert!(matches!(silhouette(x.view(), &vec![4; 50]), Err(ClusterError::SingleCluster)));
        assert!(matches!(calinski_harabasz(x.view(), &vec![0; 50]), Err(ClusterError::SingleCluster)));
    }

    #[test]
    fn ari_known_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
        // sklearn: adjusted_rand_score([0,0,1,1],[0,0,1,2]) = 0.5714285714285715
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap();
        assert!((v - 4.0 / 7.0).abs() < 1e-12);
        // adjusted_rand_score([0,0,1,2],[0,0,1,1]) symmetric
        let w = adjusted_rand_index(&[0, 0, 1, 2], &[0, 0, 1, 1]).unwrap();
        assert!((v - w).abs() < 1e-15);
        let neg = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!((neg + 0.5).abs() < 1e-12);
    }

    #[test]
    fn select_k_rejects_bad_ranges() {
        let (x, _) = blobs(&[(0.0, 0.0), (5.0, 5.0)], 5, 0.5, 2);
        let p = SelectionParams::default();
        assert!(matches!(select_k(x.view(), 2..=10, &p, 0), Err(ClusterError::InvalidKRange { .. })));
        assert!(matches!(select_k(x.view(), 1..=3, &p, 0), Err(ClusterError::InvalidKRange { .. })));
        assert!(select_k(x.view(), 2..=9, &p, 0).is_ok());
    }

    #[test]
    fn select_k_finds_four_blobs() {
        let (x, _) = blobs(&[(0.0, 0.0), (20.0, 0.0), (0.0, 20.0), (20.0, 20.0)], 40, 1.0, 21);
        let sel = select_k(x.view(), 3..=8, &SelectionParams::default(), 4).unwrap();
        assert_eq!(sel.ranking[0], 4);
        assert_eq!(sel.report.keys().copied().collect::<Vec<_>>(), (3..=8).collect::<Vec<_>>());
    }

    #[test]
    fn external_ranking() {
        let scores = BTreeMap::from([(3, Some(1.0)), (4, None), (5, Some(7.0)), (6, Some(1.0))]);
        assert_eq!(rank_by_score(&scores), vec![5, 3, 6, 4]);
    }
}

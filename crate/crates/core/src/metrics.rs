//! k-NN manifold estimates, per-image precision/recall flags, the per-cluster
//! metrics and the dataset-level summary (Fréchet distance, precision,
//! recall).
//!
//! Precision asks, for each right-split image, whether it falls inside the
//! manifold estimated from the left split; recall asks the converse for
//! left-split images. A manifold is the union of balls centred on each
//! support point with radius equal to that point's distance to its
//! `knn_k`-th nearest other support point. Flags are computed once over the
//! full splits and then aggregated per cluster.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{EmbeddingMatrix, ImageRecord, Side};
use crate::neighbors::{sq_dist_mixed, NeighborIndex};

pub const DEFAULT_KNN_K: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("support of {size} points is too small for knn_k = {knn_k} (needs at least {})", knn_k + 1)]
    SupportTooSmall { size: usize, knn_k: usize },
    #[error("knn_k must be at least 1")]
    ZeroK,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
}

/// k-NN ball cover of one split.
#[derive(Debug, Clone)]
pub struct ManifoldIndex {
    dim: usize,
    knn_k: usize,
    radii: Vec<f64>,
    index: NeighborIndex,
}

/// Builds the manifold of `support` (row-major, `dim` columns): each radius
/// is the distance to the `knn_k`-th nearest other support point.
pub fn build_manifold(support: &[f32], dim: usize, knn_k: usize) -> Result<ManifoldIndex, MetricsError> {
    if knn_k == 0 {
        return Err(MetricsError::ZeroK);
    }
    if dim == 0 || support.len() % dim != 0 {
        return Err(MetricsError::DimMismatch {
            expected: dim,
            actual: support.len(),
        });
    }
    let size = support.len() / dim;
    if size < knn_k + 1 {
        return Err(MetricsError::SupportTooSmall { size, knn_k });
    }
    let index = NeighborIndex::from_f32(support, dim);
    let radii = index
        .kth_sq_distances(support, knn_k, true)
        .into_iter()
        .map(f64::sqrt)
        .collect();
    Ok(ManifoldIndex {
        dim,
        knn_k,
        radii,
        index,
    })
}

impl ManifoldIndex {
    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn knn_k(&self) -> usize {
        self.knn_k
    }

    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }

    /// True iff some support point lies within its own radius of `query`.
    pub fn membership(&self, query: &[f32]) -> Result<bool, MetricsError> {
        Ok(self.membership_batch(query)?[0])
    }

    /// [`membership`](Self::membership) for every row of `queries`.
    pub fn membership_batch(&self, queries: &[f32]) -> Result<Vec<bool>, MetricsError> {
        if queries.is_empty() && self.dim > 0 {
            return Ok(Vec::new());
        }
        if queries.len() % self.dim != 0 {
            return Err(MetricsError::DimMismatch {
                expected: self.dim,
                actual: queries.len() % self.dim,
            });
        }
        Ok(self.index.within_any_radius(queries, &self.radii))
    }
}

/// Per-image manifold membership for both splits, in split-local order
/// (the i-th left image is the i-th left record in manifest order).
///
/// Each side fails independently: a split too small to estimate its
/// manifold leaves the other split's flags intact.
#[derive(Debug, Clone, PartialEq)]
pub struct PerImageFlags {
    /// One flag per right-split image: inside the left manifold.
    pub precision: Result<Vec<bool>, MetricsError>,
    /// One flag per left-split image: inside the right manifold.
    pub recall: Result<Vec<bool>, MetricsError>,
}

impl PerImageFlags {
    pub fn precision(&self) -> Option<f64> {
        self.precision.as_ref().ok().and_then(|f| fraction(f))
    }

    pub fn recall(&self) -> Option<f64> {
        self.recall.as_ref().ok().and_then(|f| fraction(f))
    }
}

fn fraction(flags: &[bool]) -> Option<f64> {
    if flags.is_empty() {
        return None;
    }
    Some(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

pub fn per_image_flags(left: &[f32], right: &[f32], dim: usize, knn_k: usize) -> PerImageFlags {
    let precision = build_manifold(left, dim, knn_k).and_then(|m| m.membership_batch(right));
    let recall = build_manifold(right, dim, knn_k).and_then(|m| m.membership_batch(left));
    PerImageFlags { precision, recall }
}

/// Flags for a dataset, gathering each split's rows in manifest order.
pub fn dataset_flags(x: &EmbeddingMatrix, records: &[ImageRecord], knn_k: usize) -> PerImageFlags {
    let left: Vec<usize> = records.iter().filter(|r| r.split == Side::Left).map(|r| r.row).collect();
    let right: Vec<usize> = records.iter().filter(|r| r.split == Side::Right).map(|r| r.row).collect();
    per_image_flags(&x.gather(&left), &x.gather(&right), x.d(), knn_k)
}

/// Metrics of one cluster. `None` marks a metric that is undefined for the
/// cluster's composition.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMetricsRow {
    pub cluster_id: usize,
    pub n_left: usize,
    pub n_right: usize,
    pub percent_split2: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub split_centroid_distance: Option<f64>,
    pub median_dist_to_centroid: Option<f64>,
}

pub const METRIC_NAMES: [&str; 5] = [
    "percent_split2",
    "precision",
    "recall",
    "split_centroid_distance",
    "median_dist_to_centroid",
];

impl ClusterMetricsRow {
    fn values(&self) -> [Option<f64>; 5] {
        [
            self.percent_split2,
            self.precision,
            self.recall,
            self.split_centroid_distance,
            self.median_dist_to_centroid,
        ]
    }

    /// Names of the metrics that are undefined for this cluster.
    pub fn undefined(&self) -> Vec<&'static str> {
        METRIC_NAMES
            .iter()
            .zip(self.values())
            .filter(|(_, v)| v.is_none())
            .map(|(name, _)| *name)
            .collect()
    }

    pub fn to_record(&self) -> ClusterMetricsRecord {
        ClusterMetricsRecord {
            id: self.cluster_id,
            n_left: self.n_left,
            n_right: self.n_right,
            percent_split2: self.percent_split2.unwrap_or(0.0),
            precision: self.precision.unwrap_or(0.0),
            recall: self.recall.unwrap_or(0.0),
            split_centroid_distance: self.split_centroid_distance.unwrap_or(0.0),
            median_dist_to_centroid: self.median_dist_to_centroid.unwrap_or(0.0),
            undefined: self.undefined().into_iter().map(String::from).collect(),
        }
    }
}

/// Serialized cluster row: undefined metrics are written as `0` and listed
/// by name in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetricsRecord {
    pub id: usize,
    pub n_left: usize,
    pub n_right: usize,
    pub percent_split2: f64,
    pub precision: f64,
    pub recall: f64,
    pub split_centroid_distance: f64,
    pub median_dist_to_centroid: f64,
    pub undefined: Vec<String>,
}

impl From<&ClusterMetricsRecord> for ClusterMetricsRow {
    fn from(r: &ClusterMetricsRecord) -> Self {
        let value = |name: &str, v: f64| (!r.undefined.iter().any(|u| u == name)).then_some(v);
        ClusterMetricsRow {
            cluster_id: r.id,
            n_left: r.n_left,
            n_right: r.n_right,
            percent_split2: value("percent_split2", r.percent_split2),
            precision: value("precision", r.precision),
            recall: value("recall", r.recall),
            split_centroid_distance: value("split_centroid_distance", r.split_centroid_distance),
            median_dist_to_centroid: value("median_dist_to_centroid", r.median_dist_to_centroid),
        }
    }
}

/// One metrics row per cluster id in `0..k`.
pub fn cluster_metrics(
    assignments: &[usize],
    k: usize,
    flags: &PerImageFlags,
    x: &EmbeddingMatrix,
    records: &[ImageRecord],
) -> Result<Vec<ClusterMetricsRow>, MetricsError> {
    let n = x.n();
    if assignments.len() != n || records.len() != n {
        return Err(MetricsError::Inconsistent(format!(
            "{} assignments and {} records for {n} embeddings",
            assignments.len(),
            records.len()
        )));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
        return Err(MetricsError::Inconsistent(format!("cluster id {bad} outside 0..{k}")));
    }
    // Split-local position of every row.
    let mut local = vec![0usize; n];
    let mut counts = [0usize; 2];
    for r in records {
        let side = r.split as usize;
        local[r.row] = counts[side];
        counts[side] += 1;
    }
    for (side_flags, expected) in [(&flags.precision, counts[1]), (&flags.recall, counts[0])] {
        if let Ok(f) = side_flags {
            if f.len() != expected {
                return Err(MetricsError::Inconsistent(format!(
                    "{} flags for a split of {expected}",
                    f.len()
                )));
            }
        }
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (row, &c) in assignments.iter().enumerate() {
        members[c].push(row);
    }
    let d = x.d();
    let rows = members
        .iter()
        .enumerate()
        .map(|(cluster_id, rows)| {
            let mut n_side = [0usize; 2];
            let mut hits = [0usize; 2];
            let mut sums = [vec![0.0f64; d], vec![0.0f64; d]];
            for &row in rows {
                let side = records[row].split;
                let s = side as usize;
                n_side[s] += 1;
                let flag = match side {
                    Side::Left => flags.recall.as_ref().ok().map(|f| f[local[row]]),
                    Side::Right => flags.precision.as_ref().ok().map(|f| f[local[row]]),
                };
                if flag == Some(true) {
                    hits[s] += 1;
                }
                for (acc, &v) in sums[s].iter_mut().zip(x.row(row)) {
                    *acc += f64::from(v);
                }
            }
            let [n_left, n_right] = n_side;
            let total = n_left + n_right;
            let percent_split2 = (total > 0).then(|| n_right as f64 / total as f64);
            let precision = (n_right > 0 && flags.precision.is_ok()).then(|| hits[1] as f64 / n_right as f64);
            let recall = (n_left > 0 && flags.recall.is_ok()).then(|| hits[0] as f64 / n_left as f64);
            let split_centroid_distance = (n_left > 0 && n_right > 0).then(|| {
                sums[0]
                    .iter()
                    .zip(&sums[1])
                    .map(|(l, r)| {
                        let t = l / n_left as f64 - r / n_right as f64;
                        t * t
                    })
                    .sum::<f64>()
                    .sqrt()
            });
            let median_dist_to_centroid = (total > 0).then(|| {
                let centroid: Vec<f64> = sums[0]
                    .iter()
                    .zip(&sums[1])
                    .map(|(l, r)| (l + r) / total as f64)
                    .collect();
                let mut dists: Vec<f64> = rows
                    .iter()
                    .map(|&row| sq_dist_mixed(x.row(row), &centroid).sqrt())
                    .collect();
                median(&mut dists)
            });
            ClusterMetricsRow {
                cluster_id,
                n_left,
                n_right,
                percent_split2,
                precision,
                recall,
                split_centroid_distance,
                median_dist_to_centroid,
            }
        })
        .collect();
    Ok(rows)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        (values[m - 1] + values[m]) / 2.0
    }
}

/// Sample mean and unbiased (n - 1) covariance of `data` (row-major,
/// `dim` columns). `None` when fewer than two rows are given.
pub fn sample_moments(data: &[f32], dim: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = data.len() / dim;
    if n < 2 {
        return None;
    }
    let mut mean = vec![0.0f64; dim];
    for row in data.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    const CHUNK: usize = 2048;
    let mut cov = vec![0.0f64; dim * dim];
    for chunk in data.chunks(CHUNK * dim) {
        let rows = chunk.len() / dim;
        let centered: Vec<f64> = chunk
            .chunks_exact(dim)
            .flat_map(|row| row.iter().zip(&mean).map(|(&v, &m)| f64::from(v) - m))
            .collect();
        // SAFETY: `centered` is `rows x dim` row-major; reading it with
        // swapped strides gives its transpose. `cov` is `dim x dim`.
        unsafe {
            matrixmultiply::dgemm(
                dim,
                rows,
                dim,
                1.0,
                centered.as_ptr(),
                1,
                dim as isize,
                centered.as_ptr(),
                dim as isize,
                1,
                1.0,
                cov.as_mut_ptr(),
                dim as isize,
                1,
            );
        }
    }
    let scale = 1.0 / (n as f64 - 1.0);
    for i in 0..dim {
        for j in i..dim {
            let v = (cov[i * dim + j] + cov[j * dim + i]) * 0.5 * scale;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    Some((mean, cov))
}

fn symmetric(values: &[f64], dim: usize) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(dim, dim, values);
    (&m + m.transpose()) * 0.5
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clamped to 0.
fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eigen = SymmetricEigen::new(m);
    let roots = eigen.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eigen.eigenvectors * DMatrix::from_diagonal(&roots) * eigen.eigenvectors.transpose()
}

/// Fréchet distance between the Gaussians `N(mean1, cov1)` and
/// `N(mean2, cov2)`: `|mean1 - mean2|^2 + Tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2))`.
///
/// The trace of the cross term is taken from the symmetric form
/// `cov1^(1/2) cov2 cov1^(1/2)`, which shares its eigenvalues with
/// `cov1 cov2`. Inputs are symmetrised first; the result is clamped at 0.
pub fn frechet_distance(
    mean1: &[f64],
    cov1: &[f64],
    mean2: &[f64],
    cov2: &[f64],
) -> Result<f64, MetricsError> {
    let dim = mean1.len();
    if mean2.len() != dim {
        return Err(MetricsError::DimMismatch {
            expected: dim,
            actual: mean2.len(),
        });
    }
    for cov in [cov1, cov2] {
        if cov.len() != dim * dim {
            return Err(MetricsError::DimMismatch {
                expected: dim * dim,
                actual: cov.len(),
            });
        }
    }
    if [mean1, cov1, mean2, cov2].iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(MetricsError::NonFinite("Fréchet moments"));
    }
    let mean_term: f64 = mean1.iter().zip(mean2).map(|(a, b)| (a - b) * (a - b)).sum();
    let s1 = symmetric(cov1, dim);
    let s2 = symmetric(cov2, dim);
    let root1 = psd_sqrt(s1.clone());
    let product = &root1 * &s2 * &root1;
    let product = (&product + product.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(product)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let fd = mean_term + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Dataset-level statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub n_total: usize,
    pub n_left: usize,
    pub n_right: usize,
    pub frechet_distance: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub embedding_name: String,
    pub knn_k: usize,
    pub dim: usize,
    pub mean_left: Option<Vec<f64>>,
    pub mean_right: Option<Vec<f64>>,
    pub cov_left: Option<Vec<f64>>,
    pub cov_right: Option<Vec<f64>>,
}

pub fn dataset_summary(
    x: &EmbeddingMatrix,
    records: &[ImageRecord],
    flags: &PerImageFlags,
    knn_k: usize,
) -> Result<DatasetSummary, MetricsError> {
    let left: Vec<usize> = records.iter().filter(|r| r.split == Side::Left).map(|r| r.row).collect();
    let right: Vec<usize> = records.iter().filter(|r| r.split == Side::Right).map(|r| r.row).collect();
    let d = x.d();
    let left_moments = sample_moments(&x.gather(&left), d);
    let right_moments = sample_moments(&x.gather(&right), d);
    let frechet_distance = match (&left_moments, &right_moments) {
        (Some((m1, c1)), Some((m2, c2))) => Some(frechet_distance(m1, c1, m2, c2)?),
        _ => None,
    };
    let (mean_left, cov_left) = left_moments.unzip();
    let (mean_right, cov_right) = right_moments.unzip();
    Ok(DatasetSummary {
        n_total: records.len(),
        n_left: left.len(),
        n_right: right.len(),
        frechet_distance,
        precision: flags.precision(),
        recall: flags.recall(),
        embedding_name: x.embedding_name().to_string(),
        knn_k,
        dim: d,
        mean_left,
        mean_right,
        cov_left,
        cov_right,
    })
}

/// Serialized summary. Undefined metrics are written as 0 and named in
/// `undefined`; covariances live in a binary sidecar named by
/// `covariance_file`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub n_total: usize,
    pub n_left: usize,
    pub n_right: usize,
    pub frechet_distance: f64,
    pub precision: f64,
    pub recall: f64,
    pub undefined: Vec<String>,
    pub embedding_name: String,
    pub knn_k: usize,
    pub dim: usize,
    pub mean_left: Option<Vec<f64>>,
    pub mean_right: Option<Vec<f64>>,
    pub covariance_file: Option<String>,
}

impl DatasetSummary {
    pub fn to_record(&self, covariance_file: Option<&str>) -> SummaryRecord {
        let mut undefined = Vec::new();
        let mut value = |name: &str, v: Option<f64>| {
            if v.is_none() {
                undefined.push(name.to_string());
            }
            v.unwrap_or(0.0)
        };
        SummaryRecord {
            n_total: self.n_total,
            n_left: self.n_left,
            n_right: self.n_right,
            frechet_distance: value("frechet_distance", self.frechet_distance),
            precision: value("precision", self.precision),
            recall: value("recall", self.recall),
            undefined,
            embedding_name: self.embedding_name.clone(),
            knn_k: self.knn_k,
            dim: self.dim,
            mean_left: self.mean_left.clone(),
            mean_right: self.mean_right.clone(),
            covariance_file: covariance_file.map(String::from),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighbors::sq_dist;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn pts(values: &[f32]) -> Vec<f32> {
        values.iter().flat_map(|&v| [v, 0.0]).collect()
    }

    fn oracle_radii(support: &[f32], dim: usize, k: usize) -> Vec<f64> {
        let n = support.len() / dim;
        (0..n)
            .map(|i| {
                let mut d: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| sq_dist(&support[i * dim..(i + 1) * dim], &support[j * dim..(j + 1) * dim]).sqrt())
                    .collect();
                d.sort_by(f64::total_cmp);
                d[k - 1]
            })
            .collect()
    }

    fn oracle_flags(queries: &[f32], support: &[f32], dim: usize, k: usize) -> Vec<bool> {
        let radii = oracle_radii(support, dim, k);
        queries
            .chunks_exact(dim)
            .map(|q| {
                support
                    .chunks_exact(dim)
                    .zip(&radii)
                    .any(|(s, &r)| sq_dist(q, s).sqrt() <= r)
            })
            .collect()
    }

    fn gaussian(n: usize, dim: usize, shift: f64, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * dim)
            .map(|_| (shift + rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect()
    }

    #[test]
    fn radii_by_hand() {
        let m = build_manifold(&pts(&[0.0, 1.0, 3.0]), 2, 1).unwrap();
        assert_eq!(m.radii(), &[1.0, 1.0, 2.0]);
        let m = build_manifold(&pts(&[4.0; 6]), 2, 1).unwrap();
        assert!(m.radii().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn radii_match_all_pairs() {
        let support = gaussian(50, 8, 0.0, 5);
        let m = build_manifold(&support, 8, 3).unwrap();
        assert_eq!(m.radii(), oracle_radii(&support, 8, 3).as_slice());
    }

    #[test]
    fn small_support_is_an_error() {
        assert_eq!(
            build_manifold(&pts(&[0.0, 1.0, 2.0]), 2, 3).unwrap_err(),
            MetricsError::SupportTooSmall { size: 3, knn_k: 3 }
        );
    }

    #[test]
    fn membership_by_hand() {
        let m = build_manifold(&pts(&[0.0, 1.0, 3.0]), 2, 1).unwrap();
        assert!(m.membership(&[2.5, 0.0]).unwrap());
        assert!(!m.membership(&[10.0, 0.0]).unwrap());
        assert!(m.membership(&[3.0, 0.0]).unwrap());
        assert!(m.membership(&[5.0, 0.0]).unwrap());
        assert!(!m.membership(&[5.01, 0.0]).unwrap());
        assert!(matches!(m.membership(&[1.0, 2.0, 3.0]), Err(MetricsError::DimMismatch { .. })));
    }

    #[test]
    fn flags_by_hand() {
        let flags = per_image_flags(&pts(&[0.0, 1.0]), &pts(&[0.5, 5.0]), 2, 1);
        assert_eq!(flags.precision, Ok(vec![true, false]));
        assert_eq!(flags.recall, Ok(vec![true, true]));
        assert_eq!(flags.precision(), Some(0.5));
        assert_eq!(flags.recall(), Some(1.0));
    }

    #[test]
    fn identical_splits_are_fully_covered() {
        let data = gaussian(60, 4, 0.0, 1);
        let flags = per_image_flags(&data, &data, 4, 3);
        assert_eq!(flags.precision(), Some(1.0));
        assert_eq!(flags.recall(), Some(1.0));
    }

    #[test]
    fn flags_match_oracle() {
        let left = gaussian(200, 6, 0.0, 10);
        let right = gaussian(200, 6, 0.7, 11);
        let flags = per_image_flags(&left, &right, 6, 3);
        assert_eq!(flags.precision.unwrap(), oracle_flags(&right, &left, 6, 3));
        assert_eq!(flags.recall.unwrap(), oracle_flags(&left, &right, 6, 3));
    }

    #[test]
    fn sides_fail_independently() {
        let flags = per_image_flags(&pts(&[0.0, 1.0, 2.0, 3.0]), &pts(&[0.5]), 2, 1);
        assert!(flags.precision.is_ok());
        assert_eq!(flags.recall, Err(MetricsError::SupportTooSmall { size: 1, knn_k: 1 }));
    }

    #[test]
    fn larger_k_never_removes_membership() {
        let left = gaussian(120, 5, 0.0, 3);
        let right = gaussian(120, 5, 1.0, 4);
        let mut previous: Option<Vec<bool>> = None;
        for k in 1..=6 {
            let flags = per_image_flags(&left, &right, 5, k).precision.unwrap();
            if let Some(prev) = &previous {
                assert!(prev.iter().zip(&flags).all(|(&a, &b)| !a || b));
            }
            previous = Some(flags);
        }
    }

    fn record(row: usize, split: Side) -> ImageRecord {
        ImageRecord {
            id: format!("r{row}"),
            split,
            path: None,
            label: None,
            row,
        }
    }

    #[test]
    fn cluster_rows_by_hand() {
        // Cluster 0: left {0, 2}, right {1}; cluster 1: left {3,4,5}, right {6}.
        let values = [0.0, 1.0, 2.0, 10.0, 10.0, 10.0, 10.0];
        let x = EmbeddingMatrix::new(pts(&values), 7, 2, "t").unwrap();
        let sides = [Side::Left, Side::Right, Side::Left, Side::Left, Side::Left, Side::Left, Side::Right];
        let records: Vec<_> = sides.iter().enumerate().map(|(i, &s)| record(i, s)).collect();
        let flags = PerImageFlags {
            precision: Ok(vec![true, false]),
            recall: Ok(vec![true, false, true, true, false]),
        };
        let rows = cluster_metrics(&[0, 0, 0, 1, 1, 1, 1], 2, &flags, &x, &records).unwrap();
        assert_eq!(rows[0].median_dist_to_centroid, Some(1.0));
        assert_eq!(rows[0].split_centroid_distance, Some(0.0));
        assert_eq!(rows[0].precision, Some(1.0));
        assert_eq!(rows[0].recall, Some(0.5));
        assert_eq!(rows[1].percent_split2, Some(0.25));
        assert_eq!(rows[1].precision, Some(0.0));
        assert_eq!(rows[1].recall, Some(2.0 / 3.0));
        assert!(rows[1].undefined().is_empty());
    }

    #[test]
    fn split_centroid_distance_by_hand() {
        let x = EmbeddingMatrix::new(pts(&[0.0, 2.0, 3.0]), 3, 2, "t").unwrap();
        let records = vec![record(0, Side::Left), record(1, Side::Left), record(2, Side::Right)];
        let flags = PerImageFlags {
            precision: Ok(vec![true]),
            recall: Ok(vec![true, true]),
        };
        let rows = cluster_metrics(&[0, 0, 0], 1, &flags, &x, &records).unwrap();
        assert_eq!(rows[0].split_centroid_distance, Some(2.0));
    }

    #[test]
    fn single_split_cluster_reports_undefined_recall_as_zero() {
        let x = EmbeddingMatrix::new(pts(&[0.0, 1.0, 50.0, 51.0]), 4, 2, "t").unwrap();
        let records = vec![
            record(0, Side::Left),
            record(1, Side::Left),
            record(2, Side::Right),
            record(3, Side::Right),
        ];
        let flags = PerImageFlags {
            precision: Ok(vec![false, false]),
            recall: Ok(vec![false, false]),
        };
        let rows = cluster_metrics(&[0, 0, 1, 1], 2, &flags, &x, &records).unwrap();
        assert_eq!(rows[1].recall, None);
        assert_eq!(rows[1].percent_split2, Some(1.0));
        let rec = rows[1].to_record();
        assert_eq!(rec.recall, 0.0);
        assert_eq!(rec.undefined, vec!["recall", "split_centroid_distance"]);
        assert_eq!(ClusterMetricsRow::from(&rec), rows[1]);
        assert_eq!(rows[0].undefined(), vec!["precision", "split_centroid_distance"]);
    }

    #[test]
    fn frechet_closed_forms() {
        assert_eq!(frechet_distance(&[0.0, 1.0], &[1.0, 0.2, 0.2, 2.0], &[0.0, 1.0], &[1.0, 0.2, 0.2, 2.0]).unwrap() < 1e-12, true);
        let fd = frechet_distance(&[0.0], &[1.0], &[1.0], &[4.0]).unwrap();
        assert!((fd - 2.0).abs() < 1e-12);
        let fd = frechet_distance(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], &[4.0, 0.0, 0.0, 4.0]).unwrap();
        assert!((fd - 2.0).abs() < 1e-12);
        assert!(frechet_distance(&[f64::NAN], &[1.0], &[0.0], &[1.0]).is_err());
        assert!(frechet_distance(&[0.0], &[1.0], &[0.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn frechet_is_symmetric_and_grows_with_shift() {
        let a = gaussian(300, 5, 0.0, 8);
        let b = gaussian(300, 5, 0.3, 9);
        let (m1, c1) = sample_moments(&a, 5).unwrap();
        let (m2, c2) = sample_moments(&b, 5).unwrap();
        let ab = frechet_distance(&m1, &c1, &m2, &c2).unwrap();
        let ba = frechet_distance(&m2, &c2, &m1, &c1).unwrap();
        assert!((ab - ba).abs() <= 1e-9);
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let mut last = -1.0;
        for t in [0.0, 0.5, 1.0, 2.0] {
            let fd = frechet_distance(&[0.0; 3], &eye, &[t, 0.0, 0.0], &eye).unwrap();
            assert!(fd > last);
            last = fd;
        }
    }

    #[test]
    fn moments_match_naive_formula() {
        let a = gaussian(37, 3, 1.0, 2);
        let (mean, cov) = sample_moments(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let naive: f64 = a
                    .chunks_exact(3)
                    .map(|r| (f64::from(r[i]) - mean[i]) * (f64::from(r[j]) - mean[j]))
                    .sum::<f64>()
                    / 36.0;
                assert!((cov[i * 3 + j] - naive).abs() < 1e-12);
            }
        }
        assert!(sample_moments(&a[..3], 3).is_none());
    }

    #[test]
    fn summary_of_identical_splits() {
        let ds = crate::synth::identical_splits(1000, 16, 4);
        let flags = dataset_flags(&ds.embeddings, &ds.records, 3);
        let summary = dataset_summary(&ds.embeddings, &ds.records, &flags, 3).unwrap();
        assert!(summary.frechet_distance.unwrap() <= 1e-6);
        assert_eq!(summary.precision, Some(1.0));
        assert_eq!(summary.recall, Some(1.0));
        assert_eq!((summary.n_total, summary.n_left, summary.n_right), (2000, 1000, 1000));
    }

    #[test]
    fn summary_echoes_counts() {
        let n_left = 67_542;
        let n_right = 60_000;
        let mut records = Vec::with_capacity(n_left + n_right);
        for row in 0..n_left + n_right {
            records.push(record(row, if row < n_left { Side::Left } else { Side::Right }));
        }
        let x = EmbeddingMatrix::new(
            (0..(n_left + n_right) * 2).map(|i| (i % 7) as f32).collect(),
            n_left + n_right,
            2,
            "t",
        )
        .unwrap();
        let flags = PerImageFlags {
            precision: Ok(vec![true; n_right]),
            recall: Ok(vec![false; n_left]),
        };
        let s = dataset_summary(&x, &records, &flags, 3).unwrap();
        assert_eq!((s.n_total, s.n_left, s.n_right), (127_542, 67_542, 60_000));
        assert_eq!(s.precision, Some(1.0));
        assert_eq!(s.recall, Some(0.0));
    }

    #[test]
    fn summary_marks_frechet_undefined_for_tiny_split() {
        let x = EmbeddingMatrix::new(pts(&[0.0, 1.0, 2.0]), 3, 2, "t").unwrap();
        let records = vec![record(0, Side::Left), record(1, Side::Left), record(2, Side::Right)];
        let flags = per_image_flags(&x.gather(&[0, 1]), &x.gather(&[2]), 2, 1);
        let s = dataset_summary(&x, &records, &flags, 1).unwrap();
        assert_eq!(s.frechet_distance, None);
        assert_eq!(s.recall, None);
        assert_eq!(s.to_record(None).undefined, vec!["frechet_distance", "recall"]);
    }
}

//! Seeded k-means++ initialisation and Lloyd iteration over the union of
//! both splits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EmbeddingMatrix;
use crate::neighbors::{sq_dist_f64, sq_dist_mixed, NeighborIndex};

/// Cluster counts offered when none are configured.
pub const DEFAULT_K_LIST: [usize; 3] = [250, 500, 1000];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusteringError {
    #[error("k must be between 1 and the sample count {n}, got {k}")]
    InvalidK { k: usize, n: usize },
    #[error("centroid dimension {centroid} does not match embedding dimension {data}")]
    DimMismatch { data: usize, centroid: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    pub max_iter: usize,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansParams {
            k,
            seed,
            tol: 1e-4,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    pub k: usize,
    pub dim: usize,
    /// Cluster id per sample, in `0..k`.
    pub assignments: Vec<usize>,
    /// Row-major `k x dim`.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after every assignment step, final pass included.
    pub inertia_history: Vec<f64>,
}

impl ClusteringResult {
    pub fn centroid(&self, cluster: usize) -> &[f64] {
        &self.centroids[cluster * self.dim..(cluster + 1) * self.dim]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Member rows of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.k];
        for (row, &a) in self.assignments.iter().enumerate() {
            members[a].push(row);
        }
        members
    }

    pub fn recompute_inertia(&self, x: &EmbeddingMatrix) -> f64 {
        self.assignments
            .iter()
            .enumerate()
            .map(|(i, &c)| sq_dist_mixed(x.row(i), self.centroid(c)))
            .sum()
    }
}

fn check_k(k: usize, n: usize) -> Result<(), ClusteringError> {
    if k == 0 || k > n {
        return Err(ClusteringError::InvalidK { k, n });
    }
    Ok(())
}

/// Rows chosen by k-means++ seeding: the first uniformly, each next with
/// probability proportional to its squared distance to the nearest chosen
/// row. When every remaining row coincides with a chosen one, the next row
/// is drawn uniformly from the unchosen rows so that all `k` are distinct.
pub fn kmeans_pp_seed_rows(
    x: &EmbeddingMatrix,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, ClusteringError> {
    let n = x.n();
    check_k(k, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut closest: Vec<f64> = vec![f64::INFINITY; n];
    update_closest(x, &mut closest, first);

    while chosen.len() < k {
        let total: f64 = closest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_positive = None;
            for (i, &d) in closest.iter().enumerate() {
                if d > 0.0 {
                    acc += d;
                    last_positive = Some(i);
                    if acc > target {
                        pick = Some(i);
                        break;
                    }
                }
            }
            pick.or(last_positive).expect("positive total has a positive term")
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        taken[next] = true;
        update_closest(x, &mut closest, next);
    }
    Ok(chosen)
}

fn update_closest(x: &EmbeddingMatrix, closest: &mut [f64], center: usize) {
    let c = x.row(center).to_vec();
    let d = x.d();
    closest
        .par_iter_mut()
        .zip(x.data().par_chunks_exact(d))
        .for_each(|(best, row)| {
            let dist = crate::neighbors::sq_dist(row, &c);
            if dist < *best {
                *best = dist;
            }
        });
}

/// k-means++ initial centroids, row-major `k x d`.
pub fn kmeans_pp_init(x: &EmbeddingMatrix, k: usize, seed: u64) -> Result<Vec<f64>, ClusteringError> {
    let rows = kmeans_pp_seed_rows(x, k, seed)?;
    Ok(rows
        .iter()
        .flat_map(|&r| x.row(r).iter().map(|&v| f64::from(v)))
        .collect())
}

/// Nearest centroid per row (Euclidean, ties to the lowest id).
pub fn assign(x: &EmbeddingMatrix, centroids: &[f64]) -> Result<Vec<usize>, ClusteringError> {
    let d = x.d();
    if centroids.is_empty() || centroids.len() % d != 0 {
        return Err(ClusteringError::DimMismatch {
            data: d,
            centroid: if centroids.is_empty() { 0 } else { centroids.len() },
        });
    }
    Ok(nearest(x, centroids).into_iter().map(|(c, _)| c).collect())
}

fn nearest(x: &EmbeddingMatrix, centroids: &[f64]) -> Vec<(usize, f64)> {
    NeighborIndex::from_f64(centroids, x.d()).nearest(x.data())
}

/// Lloyd iteration from k-means++ seeds.
pub fn kmeans(x: &EmbeddingMatrix, params: &KMeansParams) -> Result<ClusteringResult, ClusteringError> {
    let init = kmeans_pp_init(x, params.k, params.seed)?;
    kmeans_from(x, init, params)
}

/// Lloyd iteration from explicit initial centroids (`k x d`, row-major).
pub fn kmeans_from(
    x: &EmbeddingMatrix,
    init: Vec<f64>,
    params: &KMeansParams,
) -> Result<ClusteringResult, ClusteringError> {
    let (n, d, k) = (x.n(), x.d(), params.k);
    check_k(k, n)?;
    if init.len() != k * d {
        return Err(ClusteringError::DimMismatch {
            data: d,
            centroid: init.len() / k.max(1),
        });
    }
    let mut centroids = init;
    let mut history = Vec::new();
    let mut iterations = 0;

    while iterations < params.max_iter {
        let (mut assignment, mut dists): (Vec<usize>, Vec<f64>) = nearest(x, &centroids).into_iter().unzip();
        history.push(dists.iter().sum());
        repair_empty(x, &mut assignment, &mut dists, &mut centroids, k);
        let updated = cluster_means(x, &assignment, k);
        let shift = (0..k)
            .map(|c| sq_dist_f64(&centroids[c * d..(c + 1) * d], &updated[c * d..(c + 1) * d]))
            .fold(0.0f64, f64::max)
            .sqrt();
        centroids = updated;
        iterations += 1;
        if shift < params.tol {
            break;
        }
    }

    let (mut assignments, mut dists): (Vec<usize>, Vec<f64>) = nearest(x, &centroids).into_iter().unzip();
    repair_empty(x, &mut assignments, &mut dists, &mut centroids, k);
    let inertia: f64 = dists.iter().sum();
    history.push(inertia);
    Ok(ClusteringResult {
        k,
        dim: d,
        assignments,
        centroids,
        inertia,
        iterations_run: iterations,
        inertia_history: history,
    })
}

/// Each empty cluster, in id order, takes the row farthest from its current
/// centroid among clusters that keep at least one other member.
fn repair_empty(
    x: &EmbeddingMatrix,
    assignment: &mut [usize],
    dists: &mut [f64],
    centroids: &mut [f64],
    k: usize,
) {
    let d = x.d();
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, &dist) in dists.iter().enumerate() {
            if counts[assignment[i]] > 1 && far.map_or(true, |(_, best)| dist > best) {
                far = Some((i, dist));
            }
        }
        let (row, _) = far.expect("k <= n leaves a cluster with a spare member");
        counts[assignment[row]] -= 1;
        counts[empty] = 1;
        assignment[row] = empty;
        dists[row] = 0.0;
        for (c, &v) in centroids[empty * d..(empty + 1) * d].iter_mut().zip(x.row(row)) {
            *c = f64::from(v);
        }
    }
}

fn cluster_means(x: &EmbeddingMatrix, assignment: &[usize], k: usize) -> Vec<f64> {
    let d = x.d();
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(x.row(i)) {
            *s += f64::from(v);
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        let count = count as f64;
        for s in &mut sums[c * d..(c + 1) * d] {
            *s /= count;
        }
    }
    sums
}

/// Adjusted Rand index between two labelings of the same samples.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let pairs = |c: u64| (c as f64) * (c as f64 - 1.0) / 2.0;
    let index: f64 = table.iter().map(|&c| pairs(c)).sum();
    let rows: f64 = (0..ka)
        .map(|i| pairs(table[i * kb..(i + 1) * kb].iter().sum()))
        .sum();
    let cols: f64 = (0..kb)
        .map(|j| pairs((0..ka).map(|i| table[i * kb + j]).sum()))
        .sum();
    let total = pairs(n as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

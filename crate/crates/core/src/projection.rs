//! 2D layouts of cluster centroids and cluster members.
//!
//! [`umap_project`] follows the usual UMAP construction: exact k-NN graph,
//! per-point fuzzy neighbourhoods (`rho` is the nearest non-zero neighbour
//! distance, `sigma` is found by bisection so the smoothed weights sum to
//! `log2(n_neighbors)`), fuzzy union `a + b - ab`, then a stochastic layout
//! with attractive edge samples and negative sampling. The layout starts
//! from the PCA projection, runs single-threaded from a seeded ChaCha
//! stream, and is therefore reproducible. [`pca_project`] is the exact,
//! deterministic fallback for inputs too small for UMAP.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusteringResult;
use crate::dataset::EmbeddingMatrix;
use crate::neighbors::sq_dist_f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("UMAP needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("PCA needs at least 2 points, got {0}")]
    PcaTooFewPoints(usize),
    #[error("invalid UMAP parameters: {0}")]
    BadParams(String),
    #[error("input has a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Umap,
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UmapParams {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for UmapParams {
    fn default() -> Self {
        UmapParams {
            n_neighbors: 15,
            min_dist: 0.1,
            epochs: 200,
            seed: 0,
        }
    }
}

impl UmapParams {
    /// Smallest input UMAP accepts with these parameters.
    pub fn min_points(&self) -> usize {
        4.max(self.n_neighbors + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D {
    /// Entity per coordinate row: cluster ids or embedding rows.
    pub ids: Vec<usize>,
    pub coords: Vec<[f64; 2]>,
    pub method: ProjectionMethod,
    /// Parameters of the UMAP fit; `None` for PCA.
    pub params: Option<UmapParams>,
}

impl Projection2D {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn with_ids(mut self, ids: Vec<usize>) -> Self {
        assert_eq!(ids.len(), self.coords.len());
        self.ids = ids;
        self
    }
}

fn check_input(data: &[f64], dim: usize) -> Result<usize, ProjectionError> {
    assert!(dim > 0 && data.len() % dim == 0, "bad matrix shape");
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ProjectionError::NonFinite);
    }
    Ok(data.len() / dim)
}

/// Top-two principal component scores of mean-centred `data` (`m x dim`).
/// Each component is oriented so its largest-magnitude loading is positive.
pub fn pca_project(data: &[f64], dim: usize) -> Result<Projection2D, ProjectionError> {
    let m = check_input(data, dim)?;
    if m < 2 {
        return Err(ProjectionError::PcaTooFewPoints(m));
    }
    let mut mean = vec![0.0; dim];
    for row in data.chunks_exact(dim) {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let centered = DMatrix::from_fn(m, dim, |i, j| data[i * dim + j] - mean[j]);

    // Loadings (dim x 2) from whichever Gram matrix is smaller.
    let loadings = if dim <= m {
        let cov = centered.transpose() * &centered;
        let eigen = SymmetricEigen::new((&cov + cov.transpose()) * 0.5);
        let order = descending(&eigen.eigenvalues.as_slice());
        DMatrix::from_fn(dim, 2, |i, c| order.get(c).map_or(0.0, |&k| eigen.eigenvectors[(i, k)]))
    } else {
        let gram = &centered * centered.transpose();
        let eigen = SymmetricEigen::new((&gram + gram.transpose()) * 0.5);
        let order = descending(&eigen.eigenvalues.as_slice());
        let mut loadings = DMatrix::zeros(dim, 2);
        for (c, &k) in order.iter().take(2).enumerate() {
            let lambda = eigen.eigenvalues[k];
            if lambda <= 0.0 {
                continue;
            }
            let v = centered.transpose() * eigen.eigenvectors.column(k) / lambda.sqrt();
            loadings.set_column(c, &v);
        }
        loadings
    };
    let mut loadings = loadings;
    for c in 0..2 {
        let column = loadings.column(c);
        let (mut best, mut best_abs) = (0, -1.0);
        for (i, v) in column.iter().enumerate() {
            if v.abs() > best_abs {
                best = i;
                best_abs = v.abs();
            }
        }
        if column[best] < 0.0 {
            loadings.column_mut(c).neg_mut();
        }
    }
    let scores = centered * loadings;
    Ok(Projection2D {
        ids: (0..m).collect(),
        coords: (0..m).map(|i| [scores[(i, 0)], scores[(i, 1)]]).collect(),
        method: ProjectionMethod::Pca,
        params: None,
    })
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Fits `a`, `b` of the low-dimensional similarity `1 / (1 + a d^(2b))` to
/// the offset exponential implied by `min_dist` and `spread`, by
/// Levenberg-Marquardt least squares over 300 samples of `[0, 3 spread]`.
pub fn fit_curve_params(spread: f64, min_dist: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / spread).exp() })
        .collect();
    let cost = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let r = 1.0 / (1.0 + a * x.powf(2.0 * b)) - y;
                r * r
            })
            .sum()
    };
    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut lambda = 1e-3;
    let mut current = cost(a, b);
    for _ in 0..500 {
        let (mut jtj, mut jtr) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let denom = (1.0 + a * p).powi(2);
            let r = 1.0 / (1.0 + a * p) - y;
            let ja = -p / denom;
            let jb = -a * p * 2.0 * x.ln() / denom;
            jtj[0][0] += ja * ja;
            jtj[0][1] += ja * jb;
            jtj[1][1] += jb * jb;
            jtr[0] += ja * r;
            jtr[1] += jb * r;
        }
        jtj[1][0] = jtj[0][1];
        let mut improved = false;
        for _ in 0..20 {
            let m00 = jtj[0][0] * (1.0 + lambda);
            let m11 = jtj[1][1] * (1.0 + lambda);
            let det = m00 * m11 - jtj[0][1] * jtj[1][0];
            if det.abs() < f64::MIN_POSITIVE {
                lambda *= 10.0;
                continue;
            }
            let da = -(m11 * jtr[0] - jtj[0][1] * jtr[1]) / det;
            let db = -(m00 * jtr[1] - jtj[1][0] * jtr[0]) / det;
            let (na, nb) = (a + da, b + db);
            let next = if na > 0.0 && nb > 0.0 { cost(na, nb) } else { f64::INFINITY };
            if next < current {
                let done = (current - next) <= 1e-15 * current.max(1e-300);
                a = na;
                b = nb;
                current = next;
                lambda = (lambda / 10.0).max(1e-12);
                improved = !done;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (a, b)
}

/// Exact k nearest other points per row, sorted by (distance, index).
fn knn(data: &[f64], dim: usize, k: usize) -> Vec<Vec<(usize, f64)>> {
    let m = data.len() / dim;
    (0..m)
        .into_par_iter()
        .map(|i| {
            let row = &data[i * dim..(i + 1) * dim];
            let mut all: Vec<(usize, f64)> = (0..m)
                .filter(|&j| j != i)
                .map(|j| (j, sq_dist_f64(row, &data[j * dim..(j + 1) * dim]).sqrt()))
                .collect();
            let cmp = |x: &(usize, f64), y: &(usize, f64)| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0));
            if k < all.len() {
                all.select_nth_unstable_by(k, cmp);
                all.truncate(k);
            }
            all.sort_by(cmp);
            all
        })
        .collect()
}

/// Per-point `rho` and `sigma` of the smoothed k-NN distances.
fn smooth_knn(neighbors: &[Vec<(usize, f64)>], target: f64) -> Vec<(f64, f64)> {
    const TOLERANCE: f64 = 1e-5;
    const MIN_SCALE: f64 = 1e-3;
    let all_mean = {
        let (sum, count) = neighbors
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, c), &(_, d)| (s + d, c + 1));
        if count > 0 { sum / count as f64 } else { 0.0 }
    };
    neighbors
        .iter()
        .map(|row| {
            let rho = row.iter().map(|&(_, d)| d).find(|&d| d > 0.0).unwrap_or(0.0);
            let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
            for _ in 0..64 {
                let psum: f64 = row
                    .iter()
                    .map(|&(_, d)| {
                        let t = d - rho;
                        if t > 0.0 { (-t / mid).exp() } else { 1.0 }
                    })
                    .sum();
                if (psum - target).abs() < TOLERANCE {
                    break;
                }
                if psum > target {
                    hi = mid;
                    mid = (lo + hi) / 2.0;
                } else {
                    lo = mid;
                    mid = if hi.is_infinite() { mid * 2.0 } else { (lo + hi) / 2.0 };
                }
            }
            let floor = if rho > 0.0 {
                MIN_SCALE * row.iter().map(|&(_, d)| d).sum::<f64>() / row.len().max(1) as f64
            } else {
                MIN_SCALE * all_mean
            };
            (rho, mid.max(floor))
        })
        .collect()
}

/// Symmetrised fuzzy graph as directed edges `(head, tail, weight)` in
/// ascending `(head, tail)` order.
fn fuzzy_graph(data: &[f64], dim: usize, n_neighbors: usize) -> Vec<(usize, usize, f64)> {
    let neighbors = knn(data, dim, n_neighbors - 1);
    let params = smooth_knn(&neighbors, (n_neighbors as f64).log2());
    let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, row) in neighbors.iter().enumerate() {
        let (rho, sigma) = params[i];
        for &(j, d) in row {
            let w = if d - rho <= 0.0 || sigma <= 0.0 {
                1.0
            } else {
                (-(d - rho) / sigma).exp()
            };
            directed.insert((i, j), w);
        }
    }
    let mut edges = Vec::with_capacity(directed.len() * 2);
    let mut union: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&(i, j), &w) in &directed {
        let back = directed.get(&(j, i)).copied().unwrap_or(0.0);
        let fused = w + back - w * back;
        union.insert((i, j), fused);
        union.insert((j, i), fused);
    }
    for ((i, j), w) in union {
        if w > 0.0 {
            edges.push((i, j, w));
        }
    }
    edges
}

/// UMAP layout of `data` (`m x dim`, row-major) into 2D, centred at the
/// origin.
pub fn umap_project(data: &[f64], dim: usize, params: &UmapParams) -> Result<Projection2D, ProjectionError> {
    let m = check_input(data, dim)?;
    if params.n_neighbors < 2 {
        return Err(ProjectionError::BadParams("n_neighbors must be at least 2".into()));
    }
    if params.min_dist < 0.0 || !params.min_dist.is_finite() {
        return Err(ProjectionError::BadParams("min_dist must be finite and non-negative".into()));
    }
    if m < params.min_points() {
        return Err(ProjectionError::TooFewPoints {
            needed: params.min_points(),
            got: m,
        });
    }
    let (a, b) = fit_curve_params(1.0, params.min_dist);
    let mut edges = fuzzy_graph(data, dim, params.n_neighbors);
    let max_w = edges.iter().map(|e| e.2).fold(0.0, f64::max);
    let epochs = params.epochs.max(1) as f64;
    edges.retain(|e| e.2 >= max_w / epochs);

    let mut coords = initial_layout(data, dim)?;
    optimize_layout(&mut coords, &edges, max_w, a, b, params);

    let mut center = [0.0f64; 2];
    for c in &coords {
        center[0] += c[0];
        center[1] += c[1];
    }
    center.iter_mut().for_each(|v| *v /= m as f64);
    for c in coords.iter_mut() {
        c[0] -= center[0];
        c[1] -= center[1];
    }
    Ok(Projection2D {
        ids: (0..m).collect(),
        coords,
        method: ProjectionMethod::Umap,
        params: Some(*params),
    })
}

/// PCA scores rescaled so the largest absolute coordinate is 10.
fn initial_layout(data: &[f64], dim: usize) -> Result<Vec<[f64; 2]>, ProjectionError> {
    let mut coords = pca_project(data, dim)?.coords;
    let extent = coords.iter().flat_map(|c| c.iter()).fold(0.0f64, |acc, v| acc.max(v.abs()));
    if extent > 0.0 {
        let scale = 10.0 / extent;
        for c in coords.iter_mut() {
            c[0] *= scale;
            c[1] *= scale;
        }
    }
    Ok(coords)
}

fn optimize_layout(
    coords: &mut [[f64; 2]],
    edges: &[(usize, usize, f64)],
    max_w: f64,
    a: f64,
    b: f64,
    params: &UmapParams,
) {
    const NEGATIVE_SAMPLE_RATE: f64 = 5.0;
    const CLIP: f64 = 4.0;
    let m = coords.len();
    let n_epochs = params.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let per_sample: Vec<f64> = edges.iter().map(|e| max_w / e.2).collect();
    let per_negative: Vec<f64> = per_sample.iter().map(|&e| e / NEGATIVE_SAMPLE_RATE).collect();
    let mut next_sample = per_sample.clone();
    let mut next_negative = per_negative.clone();
    let clip = |v: f64| v.clamp(-CLIP, CLIP);

    for epoch in 0..n_epochs {
        let alpha = 1.0 - epoch as f64 / n_epochs as f64;
        let now = epoch as f64;
        for (e, &(head, tail, _)) in edges.iter().enumerate() {
            if next_sample[e] > now {
                continue;
            }
            let dist_sq = sq2(coords[head], coords[tail]);
            if dist_sq > 0.0 {
                let coeff = -2.0 * a * b * dist_sq.powf(b - 1.0) / (a * dist_sq.powf(b) + 1.0);
                for d in 0..2 {
                    let g = clip(coeff * (coords[head][d] - coords[tail][d])) * alpha;
                    coords[head][d] += g;
                    coords[tail][d] -= g;
                }
            }
            next_sample[e] += per_sample[e];

            let n_negative = ((now - next_negative[e]) / per_negative[e]).floor().max(0.0) as usize;
            for _ in 0..n_negative {
                let other = rng.gen_range(0..m);
                if other == head {
                    continue;
                }
                let dist_sq = sq2(coords[head], coords[other]);
                if dist_sq <= 0.0 {
                    // Coincident points exert no repulsion.
                    continue;
                }
                let coeff = 2.0 * b / ((0.001 + dist_sq) * (a * dist_sq.powf(b) + 1.0));
                for d in 0..2 {
                    coords[head][d] += clip(coeff * (coords[head][d] - coords[other][d])) * alpha;
                }
            }
            next_negative[e] += n_negative as f64 * per_negative[e];
        }
    }
}

#[inline]
fn sq2(p: [f64; 2], q: [f64; 2]) -> f64 {
    let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
    dx * dx + dy * dy
}

/// UMAP when the input is large enough, otherwise PCA.
pub fn project_auto(data: &[f64], dim: usize, params: &UmapParams) -> Result<Projection2D, ProjectionError> {
    let m = data.len() / dim;
    if m >= params.min_points() {
        umap_project(data, dim, params)
    } else if m >= 2 {
        pca_project(data, dim)
    } else {
        check_input(data, dim)?;
        Ok(Projection2D {
            ids: (0..m).collect(),
            coords: vec![[0.0, 0.0]; m],
            method: ProjectionMethod::Pca,
            params: None,
        })
    }
}

/// How member layouts of each cluster are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFit {
    /// An independent fit on each cluster's members.
    #[default]
    PerCluster,
    /// One fit over every sample, sliced per cluster.
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleProjections {
    /// Layout of the `k` centroids; ids are cluster ids.
    pub centroids: Projection2D,
    /// Member layout per cluster; ids are embedding rows.
    pub samples: Vec<Projection2D>,
}

/// Projects the centroids of `clustering` and the members of every cluster.
pub fn project_bundle(
    clustering: &ClusteringResult,
    x: &EmbeddingMatrix,
    params: &UmapParams,
    fit: SampleFit,
) -> Result<BundleProjections, ProjectionError> {
    let centroids = project_auto(&clustering.centroids, clustering.dim, params)?;
    let members = clustering.members();
    let d = x.d();
    let gather = |rows: &[usize]| -> Vec<f64> {
        rows.iter()
            .flat_map(|&r| x.row(r).iter().map(|&v| f64::from(v)))
            .collect()
    };
    let samples = match fit {
        SampleFit::PerCluster => members
            .par_iter()
            .enumerate()
            .map(|(cluster, rows)| {
                let local = UmapParams {
                    seed: params.seed ^ (cluster as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    ..*params
                };
                project_auto(&gather(rows), d, &local).map(|p| p.with_ids(rows.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?,
        SampleFit::Global => {
            let all: Vec<usize> = (0..x.n()).collect();
            let global = project_auto(&gather(&all), d, params)?;
            members
                .iter()
                .map(|rows| Projection2D {
                    ids: rows.clone(),
                    coords: rows.iter().map(|&r| global.coords[r]).collect(),
                    method: global.method,
                    params: global.params,
                })
                .collect()
        }
    };
    Ok(BundleProjections { centroids, samples })
}

//! Exact Euclidean neighbor queries accelerated by a GEMM screen.
//!
//! Every answer produced here is defined in terms of [`sq_dist`], the
//! sequential f64 sum of squared coordinate differences. Scanning a large
//! support set that way is slow, so queries are first screened with
//! single-precision matrix products over mean-centred copies of the points:
//! `|q|^2 + |s|^2 - 2 q.s`. That expansion carries a provable rounding bound,
//! and any pair whose fate the bound cannot decide is recomputed with
//! [`sq_dist`]. Results are therefore bit-identical to a brute-force scan.

use rayon::prelude::*;

const QUERY_BLOCK: usize = 256;

/// Squared Euclidean distance accumulated in f64, coordinate order.
#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let t = f64::from(x) - f64::from(y);
        acc += t * t;
    }
    acc
}

/// Squared Euclidean distance between an f32 point and an f64 point.
#[inline]
pub fn sq_dist_mixed(a: &[f32], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let t = f64::from(x) - y;
        acc += t * t;
    }
    acc
}

/// Squared Euclidean distance between two f64 points.
#[inline]
pub fn sq_dist_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let t = x - y;
        acc += t * t;
    }
    acc
}

/// Support points prepared for screened exact scans.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    dim: usize,
    n: usize,
    exact: Support,
    centered: Vec<f32>,
    norms: Vec<f64>,
    offset: Vec<f64>,
    slack_factor: f64,
}

#[derive(Debug, Clone)]
enum Support {
    Single(Vec<f32>),
    Double(Vec<f64>),
}

impl NeighborIndex {
    pub fn from_f32(points: &[f32], dim: usize) -> Self {
        assert!(dim > 0 && points.len() % dim == 0, "bad point buffer shape");
        let wide: Vec<f64> = points.iter().map(|&v| f64::from(v)).collect();
        Self::build(Support::Single(points.to_vec()), &wide, dim)
    }

    pub fn from_f64(points: &[f64], dim: usize) -> Self {
        assert!(dim > 0 && points.len() % dim == 0, "bad point buffer shape");
        Self::build(Support::Double(points.to_vec()), points, dim)
    }

    fn build(exact: Support, wide: &[f64], dim: usize) -> Self {
        let n = wide.len() / dim;
        let mut offset = vec![0.0f64; dim];
        for row in wide.chunks_exact(dim) {
            for (o, &v) in offset.iter_mut().zip(row) {
                *o += v;
            }
        }
        if n > 0 {
            for o in offset.iter_mut() {
                *o /= n as f64;
            }
        }
        let mut centered = Vec::with_capacity(wide.len());
        let mut norms = Vec::with_capacity(n);
        for row in wide.chunks_exact(dim) {
            let start = centered.len();
            centered.extend(row.iter().zip(&offset).map(|(&v, &o)| (v - o) as f32));
            norms.push(sq_norm(&centered[start..]));
        }
        // Rounding bound of the expanded form relative to |q|^2 + |s|^2:
        // the f32 dot product contributes gamma_dim, centring in f32 about 4u.
        let unit = f64::from(f32::EPSILON) / 2.0;
        let slack_factor = 1.25 * (dim as f64 + 8.0) * unit;
        NeighborIndex {
            dim,
            n,
            exact,
            centered,
            norms,
            offset,
            slack_factor,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Exact squared distance between `query` and support point `j`.
    #[inline]
    pub fn exact_sq(&self, query: &[f32], j: usize) -> f64 {
        let range = j * self.dim..(j + 1) * self.dim;
        match &self.exact {
            Support::Single(points) => sq_dist(query, &points[range]),
            Support::Double(points) => sq_dist_mixed(query, &points[range]),
        }
    }

    /// Runs `visit(query_index, screen)` for every query row, in parallel
    /// over fixed-size query blocks; results come back in query order.
    fn scan<T, F>(&self, queries: &[f32], visit: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, &Screen<'_>) -> T + Sync,
    {
        assert_eq!(queries.len() % self.dim, 0, "query dimension mismatch");
        let dim = self.dim;
        let blocks: Vec<Vec<T>> = queries
            .par_chunks(QUERY_BLOCK * dim)
            .enumerate()
            .map(|(block_idx, block)| {
                let rows = block.len() / dim;
                let mut centered = Vec::with_capacity(block.len());
                let mut norms = Vec::with_capacity(rows);
                for row in block.chunks_exact(dim) {
                    let start = centered.len();
                    centered.extend(
                        row.iter()
                            .zip(&self.offset)
                            .map(|(&v, &o)| (f64::from(v) - o) as f32),
                    );
                    norms.push(sq_norm(&centered[start..]));
                }
                let mut dots = vec![0.0f32; rows * self.n];
                if self.n > 0 {
                    // SAFETY: the pointers cover `rows x dim`, `n x dim` and
                    // `rows x n` buffers with the strides given.
                    unsafe {
                        matrixmultiply::sgemm(
                            rows,
                            dim,
                            self.n,
                            1.0,
                            centered.as_ptr(),
                            dim as isize,
                            1,
                            self.centered.as_ptr(),
                            1,
                            dim as isize,
                            0.0,
                            dots.as_mut_ptr(),
                            self.n as isize,
                            1,
                        );
                    }
                }
                (0..rows)
                    .map(|r| {
                        let screen = Screen {
                            index: self,
                            query: &block[r * dim..(r + 1) * dim],
                            query_norm: norms[r],
                            dots: &dots[r * self.n..(r + 1) * self.n],
                        };
                        visit(block_idx * QUERY_BLOCK + r, &screen)
                    })
                    .collect()
            })
            .collect();
        blocks.into_iter().flatten().collect()
    }

    /// For each query, the `k`-th smallest exact squared distance to the
    /// support. With `self_query` set, query `i` is support point `i` and is
    /// excluded from its own neighbor list.
    pub fn kth_sq_distances(&self, queries: &[f32], k: usize, self_query: bool) -> Vec<f64> {
        assert!(k >= 1);
        let available = if self_query { self.n.saturating_sub(1) } else { self.n };
        assert!(k <= available, "need at least {k} neighbors, have {available}");
        self.scan(queries, |qi, screen| {
            let skip = if self_query { Some(qi) } else { None };
            let mut upper = KSmallest::new(k);
            for j in (0..self.n).filter(|&j| Some(j) != skip) {
                upper.push(screen.upper(j));
            }
            let bound = upper.kth();
            let mut exact = KSmallest::new(k);
            for j in (0..self.n).filter(|&j| Some(j) != skip) {
                if screen.lower(j) <= bound {
                    exact.push(screen.exact(j));
                }
            }
            exact.kth()
        })
    }

    /// Nearest support point for each query, ties to the lowest index, with
    /// its exact squared distance.
    pub fn nearest(&self, queries: &[f32]) -> Vec<(usize, f64)> {
        assert!(self.n > 0, "empty support");
        self.scan(queries, |_, screen| {
            let bound = (0..self.n)
                .map(|j| screen.upper(j))
                .fold(f64::INFINITY, f64::min);
            let mut best = (usize::MAX, f64::INFINITY);
            for j in 0..self.n {
                if screen.lower(j) <= bound {
                    let d = screen.exact(j);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
            }
            best
        })
    }

    /// For each query, whether some support point `j` satisfies
    /// `sqrt(sq_dist(query, s_j)) <= radii[j]`.
    pub fn within_any_radius(&self, queries: &[f32], radii: &[f64]) -> Vec<bool> {
        assert_eq!(radii.len(), self.n);
        self.scan(queries, |_, screen| {
            for (j, &r) in radii.iter().enumerate() {
                let r2 = r * r;
                if screen.lower(j) > r2 * (1.0 + 1e-9) {
                    continue;
                }
                if screen.upper(j) < r2 * (1.0 - 1e-9) || screen.exact(j).sqrt() <= r {
                    return true;
                }
            }
            false
        })
    }
}

struct Screen<'a> {
    index: &'a NeighborIndex,
    query: &'a [f32],
    query_norm: f64,
    dots: &'a [f32],
}

impl Screen<'_> {
    #[inline]
    fn approx(&self, j: usize) -> (f64, f64) {
        let norms = self.query_norm + self.index.norms[j];
        let approx = norms - 2.0 * f64::from(self.dots[j]);
        (approx, self.index.slack_factor * norms + f64::MIN_POSITIVE)
    }

    #[inline]
    fn lower(&self, j: usize) -> f64 {
        let (a, s) = self.approx(j);
        a - s
    }

    #[inline]
    fn upper(&self, j: usize) -> f64 {
        let (a, s) = self.approx(j);
        a + s
    }

    #[inline]
    fn exact(&self, j: usize) -> f64 {
        self.index.exact_sq(self.query, j)
    }
}

/// The `k` smallest values pushed so far, kept sorted.
struct KSmallest {
    k: usize,
    values: Vec<f64>,
}

impl KSmallest {
    fn new(k: usize) -> Self {
        KSmallest {
            k,
            values: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn push(&mut self, v: f64) {
        if self.values.len() == self.k && v >= self.values[self.k - 1] {
            return;
        }
        let at = self.values.partition_point(|&x| x <= v);
        self.values.insert(at, v);
        self.values.truncate(self.k);
    }

    /// The k-th smallest value; callers guarantee at least `k` pushes.
    fn kth(&self) -> f64 {
        self.values[self.k - 1]
    }
}

fn sq_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum()
}

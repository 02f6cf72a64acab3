#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ravel::pipeline::RunConfig;
use ravel::synth::{two_split_mixture, DatasetFiles, SyntheticDataset};

/// 400 images: 4 components, 50 per split per component, 16-D, labeled.
pub fn fixture_dataset() -> SyntheticDataset {
    two_split_mixture(4, 50, 16, 1.0, 10.0, 1, true)
}

pub fn config_for(ds: &SyntheticDataset, files: &DatasetFiles, out: &Path) -> RunConfig {
    let mut config = RunConfig::new(
        &files.manifest,
        &files.embeddings_meta,
        &files.embeddings_bin,
        &ds.splits,
        out,
    );
    config.image_root = files.image_root.clone();
    config.k_list = vec![4];
    config.threads = Some(2);
    config
}

/// Writes `ds` under `dir/input` and returns a config producing `dir/out`.
pub fn write_fixture(ds: &SyntheticDataset, dir: &Path) -> RunConfig {
    let files = ds.write(&dir.join("input")).expect("write fixture");
    config_for(ds, &files, &dir.join("out"))
}

/// Every file under `root`, keyed by relative path.
pub fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &p in &idx[i..=j] {
            r[p] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Upper-triangle pairwise Euclidean distances of row-major points.
pub fn pairwise(data: &[f64], dim: usize) -> Vec<f64> {
    let n = data.len() / dim;
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = (0..dim).map(|c| (data[i * dim + c] - data[j * dim + c]).powi(2)).sum();
            out.push(d.sqrt());
        }
    }
    out
}

/// Brute-force improved precision/recall flags: `query` rows against the
/// k-NN balls of `support`.
pub fn oracle_flags(support: &[f32], query: &[f32], dim: usize, k: usize) -> Vec<bool> {
    let sq = |a: &[f32], b: &[f32]| -> f64 {
        a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum()
    };
    let ns = support.len() / dim;
    let radii: Vec<f64> = (0..ns)
        .map(|i| {
            let mut d: Vec<f64> = (0..ns)
                .filter(|&j| j != i)
                .map(|j| sq(&support[i * dim..(i + 1) * dim], &support[j * dim..(j + 1) * dim]))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1].sqrt()
        })
        .collect();
    query
        .chunks_exact(dim)
        .map(|q| (0..ns).any(|j| sq(q, &support[j * dim..(j + 1) * dim]).sqrt() <= radii[j]))
        .collect()
}

/// `components` unit-variance blobs whose centres are drawn from
/// N(0, center_sigma^2 I), so inter-blob distances vary.
pub fn random_center_mixture(
    components: usize,
    per_component: usize,
    dim: usize,
    center_sigma: f64,
    sigma: f64,
    seed: u64,
) -> Vec<f64> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(components * per_component * dim);
    for _ in 0..components {
        let center: Vec<f64> = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                center_sigma * z
            })
            .collect();
        for _ in 0..per_component {
            for &c in &center {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(c + sigma * z);
            }
        }
    }
    data
}

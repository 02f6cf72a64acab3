//! Synthetic two-split datasets for examples, tests and benchmarks.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{
    file_stem_for_id, write_embeddings, write_manifest, DatasetHandle, EmbeddingMatrix,
    ImageRecord, IngestError, Side, SplitNames,
};

/// Centre of mixture component `c`: a point on a coordinate axis, at least
/// `separation` away from every other centre.
pub fn component_center(c: usize, dim: usize, separation: f64) -> Vec<f64> {
    let mut center = vec![0.0; dim];
    center[c % dim] = separation * (1.0 + (c / dim) as f64);
    center
}

fn gaussian_point(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Vec<f32> {
    center
        .iter()
        .map(|&m| {
            let z: f64 = StandardNormal.sample(rng);
            (m + sigma * z) as f32
        })
        .collect()
}

/// `components` isotropic Gaussian blobs of `per_component` points each,
/// with the generating component of every row.
pub fn isotropic_blobs(
    components: usize,
    per_component: usize,
    dim: usize,
    sigma: f64,
    separation: f64,
    seed: u64,
) -> (EmbeddingMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(components * per_component * dim);
    let mut labels = Vec::with_capacity(components * per_component);
    for c in 0..components {
        let center = component_center(c, dim, separation);
        for _ in 0..per_component {
            data.extend(gaussian_point(&mut rng, &center, sigma));
            labels.push(c);
        }
    }
    let n = labels.len();
    (EmbeddingMatrix::new(data, n, dim, "synthetic").expect("finite synthetic data"), labels)
}

/// A generated two-split dataset.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub records: Vec<ImageRecord>,
    pub embeddings: EmbeddingMatrix,
    pub splits: SplitNames,
    /// Generating component of each row.
    pub components: Vec<usize>,
}

/// Paths written by [`SyntheticDataset::write`].
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub manifest: PathBuf,
    pub embeddings_meta: PathBuf,
    pub embeddings_bin: PathBuf,
    pub image_root: Option<PathBuf>,
}

impl SyntheticDataset {
    fn from_rows(rows: Vec<(Side, Vec<f32>, usize)>, dim: usize, labels: bool, splits: SplitNames) -> Self {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * dim);
        let mut records = Vec::with_capacity(n);
        let mut components = Vec::with_capacity(n);
        for (row, (side, point, component)) in rows.into_iter().enumerate() {
            data.extend(point);
            records.push(ImageRecord {
                id: format!("{}_{row:06}", splits.name(side)),
                split: side,
                path: None,
                label: labels.then(|| format!("class_{component:02}")),
                row,
            });
            components.push(component);
        }
        SyntheticDataset {
            records,
            embeddings: EmbeddingMatrix::new(data, n, dim, "synthetic").expect("finite synthetic data"),
            splits,
            components,
        }
    }

    pub fn handle(&self) -> DatasetHandle {
        DatasetHandle::new(self.records.clone(), self.embeddings.clone(), self.splits.clone())
            .expect("synthetic dataset is valid")
    }

    pub fn rows_of(&self, side: Side) -> Vec<usize> {
        self.records.iter().filter(|r| r.split == side).map(|r| r.row).collect()
    }

    /// Writes `manifest.jsonl`, `embeddings.meta.json` and `embeddings.bin`
    /// into `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetFiles, IngestError> {
        std::fs::create_dir_all(dir).map_err(|e| IngestError::io(dir, e))?;
        let manifest = dir.join("manifest.jsonl");
        let mut buf = Vec::new();
        write_manifest(&mut buf, &self.records, &self.splits).map_err(|e| IngestError::io(&manifest, e))?;
        std::fs::write(&manifest, buf).map_err(|e| IngestError::io(&manifest, e))?;
        let embeddings_meta = dir.join("embeddings.meta.json");
        let embeddings_bin = dir.join("embeddings.bin");
        write_embeddings(&self.embeddings, &embeddings_meta, &embeddings_bin)?;
        let image_root = self
            .records
            .iter()
            .any(|r| r.path.is_some())
            .then(|| dir.join("images"));
        Ok(DatasetFiles {
            manifest,
            embeddings_meta,
            embeddings_bin,
            image_root,
        })
    }

    /// Renders a small PNG per record under `dir/images/` and points each
    /// record's path at it. Colours follow the first embedding coordinates.
    pub fn with_images(mut self, dir: &Path, size: u32) -> Result<Self, IngestError> {
        let root = dir.join("images");
        std::fs::create_dir_all(&root).map_err(|e| IngestError::io(&root, e))?;
        for record in &mut self.records {
            let row = self.embeddings.row(record.row);
            let tint = |v: f32| ((v.abs() * 37.0) as u32 % 256) as u8;
            let (r, g) = (tint(row[0]), tint(row[1]));
            let img = image::RgbImage::from_fn(size, size, |x, y| {
                image::Rgb([r, g, ((x + y) % 256) as u8])
            });
            let name = format!("{}.png", file_stem_for_id(&record.id));
            let path = root.join(&name);
            img.save(&path).map_err(IngestError::from)?;
            record.path = Some(name);
        }
        Ok(self)
    }
}

fn default_splits() -> SplitNames {
    SplitNames::new("real", "generated").expect("distinct names")
}

/// Both splits drawn from the same `components`-blob mixture. Rows
/// alternate left/right within each component.
pub fn two_split_mixture(
    components: usize,
    per_split_per_component: usize,
    dim: usize,
    sigma: f64,
    separation: f64,
    seed: u64,
    labels: bool,
) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for c in 0..components {
        let center = component_center(c, dim, separation);
        for _ in 0..per_split_per_component {
            for side in [Side::Left, Side::Right] {
                rows.push((side, gaussian_point(&mut rng, &center, sigma), c));
            }
        }
    }
    SyntheticDataset::from_rows(rows, dim, labels, default_splits())
}

/// Two splits holding exactly the same `n` random vectors.
pub fn identical_splits(n: usize, dim: usize, seed: u64) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zero = vec![0.0; dim];
    let mut rows = Vec::with_capacity(2 * n);
    let points: Vec<Vec<f32>> = (0..n).map(|_| gaussian_point(&mut rng, &zero, 1.0)).collect();
    for side in [Side::Left, Side::Right] {
        for p in &points {
            rows.push((side, p.clone(), 0));
        }
    }
    SyntheticDataset::from_rows(rows, dim, false, default_splits())
}

/// A mode-collapse scenario: the left split samples every component of a
/// `components`-blob mixture; the right split reproduces components
/// `1..components` but maps every component-0 sample to one repeated
/// point `displacement_sigmas * sigma` away from that component's centre.
pub fn mode_collapse(
    components: usize,
    per_component: usize,
    dim: usize,
    sigma: f64,
    separation: f64,
    displacement_sigmas: f64,
    seed: u64,
) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut direction: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|v| *v /= norm);
    let collapsed: Vec<f32> = component_center(0, dim, separation)
        .iter()
        .zip(&direction)
        .map(|(&c, &u)| (c + displacement_sigmas * sigma * u) as f32)
        .collect();

    let mut rows = Vec::with_capacity(2 * components * per_component);
    for c in 0..components {
        let center = component_center(c, dim, separation);
        for _ in 0..per_component {
            rows.push((Side::Left, gaussian_point(&mut rng, &center, sigma), c));
        }
    }
    for c in 0..components {
        let center = component_center(c, dim, separation);
        for _ in 0..per_component {
            let point = if c == 0 {
                collapsed.clone()
            } else {
                gaussian_point(&mut rng, &center, sigma)
            };
            rows.push((Side::Right, point, c));
        }
    }
    SyntheticDataset::from_rows(rows, dim, true, default_splits())
}

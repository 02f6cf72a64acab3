//! The offline run: ingest, cluster, measure, project and write an
//! immutable artifact bundle.
//!
//! Bundle layout (all JSON is compact, fixed field order):
//!
//! ```text
//! run.json                       config echo, tool version, stage timings
//! manifest.jsonl                 copy of the ingested manifest
//! media.json                     id -> thumbnail / original image paths
//! flags.bin                      precision bitset then recall bitset
//! covariances.bin                left then right covariance, f64 LE
//! clusters_{k}.json              assignments and inertia
//! centroids_{k}.bin              k x d f32 LE row-major
//! metrics_{k}.json               per-cluster rows and dataset summary
//! projection_clusters_{k}.json   centroid layout
//! projection_samples_{k}/{c}.json member layout of cluster c
//! thumbs/, images/               optional image files
//! _FINALIZED                     written last; holds the config hash
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clustering::{kmeans, ClusteringResult, KMeansParams, DEFAULT_K_LIST};
use crate::dataset::{
    f32s_to_le_bytes, file_stem_for_id, make_thumbnail, write_manifest, DatasetHandle,
    EmbeddingMeta, ExternalEmbedder, ImageRecord, Side, SplitNames, DEFAULT_THUMBNAIL_EDGE,
};
use crate::json::{pretty_bytes, sync_dir, to_bytes, write_synced};
use crate::metrics::{
    cluster_metrics, dataset_flags, dataset_summary, ClusterMetricsRecord, DatasetSummary,
    PerImageFlags, SummaryRecord, DEFAULT_KNN_K,
};
use crate::projection::{project_bundle, Projection2D, ProjectionMethod, SampleFit, UmapParams};

pub const FINALIZED_MARKER: &str = "_FINALIZED";
pub const RUN_FILE: &str = "run.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MEDIA_FILE: &str = "media.json";
pub const FLAGS_FILE: &str = "flags.bin";
pub const COVARIANCE_FILE: &str = "covariances.bin";

pub fn clusters_file(k: usize) -> String {
    format!("clusters_{k}.json")
}

pub fn centroids_file(k: usize) -> String {
    format!("centroids_{k}.bin")
}

pub fn metrics_file(k: usize) -> String {
    format!("metrics_{k}.json")
}

pub fn projection_clusters_file(k: usize) -> String {
    format!("projection_clusters_{k}.json")
}

pub fn projection_samples_dir(k: usize) -> String {
    format!("projection_samples_{k}")
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
}

fn stage_err(stage: &str, err: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage: stage.to_string(),
        message: err.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub epochs: usize,
    pub sample_fit: SampleFit,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        let umap = UmapParams::default();
        ProjectionConfig {
            n_neighbors: umap.n_neighbors,
            min_dist: umap.min_dist,
            epochs: umap.epochs,
            sample_fit: SampleFit::PerCluster,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        let p = KMeansParams::new(1, 0);
        KMeansConfig {
            tol: p.tol,
            max_iter: p.max_iter,
        }
    }
}

fn default_k_list() -> Vec<usize> {
    DEFAULT_K_LIST.to_vec()
}

fn default_knn_k() -> usize {
    DEFAULT_KNN_K
}

fn default_true() -> bool {
    true
}

/// Everything a run needs. Relative paths in a config file are resolved
/// against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub embeddings_meta: PathBuf,
    pub embeddings_bin: PathBuf,
    #[serde(default)]
    pub image_root: Option<PathBuf>,
    /// Display names of the left and right splits, as used in the manifest.
    pub split_names: [String; 2],
    #[serde(default = "default_k_list")]
    pub k_list: Vec<usize>,
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    #[serde(default)]
    pub projection: ProjectionConfig,
    #[serde(default)]
    pub kmeans: KMeansConfig,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_true")]
    pub thumbnails: bool,
    /// Worker threads; part of the determinism contract.
    #[serde(default)]
    pub threads: Option<usize>,
    /// Replace a non-empty `output_dir`.
    #[serde(default)]
    pub overwrite: bool,
    /// L2-normalise embeddings before every stage.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub embedder: Option<ExternalEmbedder>,
}

impl RunConfig {
    /// Config for an on-disk dataset with every option at its default.
    pub fn new(
        manifest: impl Into<PathBuf>,
        embeddings_meta: impl Into<PathBuf>,
        embeddings_bin: impl Into<PathBuf>,
        split_names: &SplitNames,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        RunConfig {
            manifest: manifest.into(),
            embeddings_meta: embeddings_meta.into(),
            embeddings_bin: embeddings_bin.into(),
            image_root: None,
            split_names: [split_names.left.clone(), split_names.right.clone()],
            k_list: default_k_list(),
            knn_k: DEFAULT_KNN_K,
            projection: ProjectionConfig::default(),
            kmeans: KMeansConfig::default(),
            seed: 0,
            output_dir: output_dir.into(),
            thumbnails: true,
            threads: None,
            overwrite: false,
            normalize: false,
            embedder: None,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.embeddings_meta);
        fix(&mut self.embeddings_bin);
        fix(&mut self.output_dir);
        if let Some(root) = self.image_root.as_mut() {
            fix(root);
        }
    }

    pub fn split_names(&self) -> Result<SplitNames, PipelineError> {
        SplitNames::new(self.split_names[0].clone(), self.split_names[1].clone())
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn umap_params(&self) -> UmapParams {
        UmapParams {
            n_neighbors: self.projection.n_neighbors,
            min_dist: self.projection.min_dist,
            epochs: self.projection.epochs,
            seed: self.seed,
        }
    }

    /// SHA-256 of the canonical JSON form of this config. `overwrite` only
    /// controls the run, not its output, and is left out.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            overwrite: false,
            ..self.clone()
        };
        format!("{:x}", Sha256::digest(serde_json::to_vec(&canonical).expect("config serializes")))
    }

    /// Checks everything that can be checked without touching embeddings.
    /// `n` is the sample count declared by the embedding descriptor.
    pub fn validate(&self, n: usize) -> Result<(), PipelineError> {
        self.split_names()?;
        if self.k_list.is_empty() {
            return Err(PipelineError::Config("k_list is empty".into()));
        }
        if let Some(&k) = self.k_list.iter().find(|&&k| k == 0 || k > n) {
            return Err(PipelineError::Config(format!(
                "k = {k} outside 1..={n} (sample count)"
            )));
        }
        let mut sorted = self.k_list.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.k_list.len() {
            return Err(PipelineError::Config("k_list has duplicates".into()));
        }
        if self.knn_k == 0 {
            return Err(PipelineError::Config("knn_k must be at least 1".into()));
        }
        if self.projection.n_neighbors < 2 {
            return Err(PipelineError::Config("projection.n_neighbors must be at least 2".into()));
        }
        if self.threads == Some(0) {
            return Err(PipelineError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_threads(&self) -> usize {
        self.threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

/// Wall-clock and peak resident memory of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub wall_ms: u64,
    /// Process peak RSS after the stage, when the platform reports it.
    pub peak_rss_bytes: Option<u64>,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub threads: usize,
    pub split_names: SplitNames,
    pub k_list: Vec<usize>,
    pub knn_k: usize,
    pub embedding_name: String,
    pub n_total: usize,
    pub dim: usize,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub stages: Vec<StageTiming>,
    pub thumbnail_failures: Vec<String>,
    /// SHA-256 of every other artifact, keyed by bundle-relative path.
    pub artifacts: BTreeMap<String, String>,
}

/// `clusters_{k}.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClustersRecord {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations_run: usize,
    pub centroid_file: String,
}

/// `metrics_{k}.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub clusters: Vec<ClusterMetricsRecord>,
    pub summary: SummaryRecord,
}

/// Projection files. `splits` is present only for sample layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRecord {
    pub method: ProjectionMethod,
    pub params: Option<UmapParams>,
    pub ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<Vec<Side>>,
    pub coords: Vec<[f64; 2]>,
}

impl ProjectionRecord {
    fn from_projection(p: &Projection2D, sides: Option<&[Side]>) -> Self {
        ProjectionRecord {
            method: p.method,
            params: p.params,
            ids: p.ids.clone(),
            splits: sides.map(|s| p.ids.iter().map(|&r| s[r]).collect()),
            coords: p.coords.clone(),
        }
    }
}

/// `media.json`: bundle-relative image files per image id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MediaIndex {
    pub thumbnails: BTreeMap<String, String>,
    pub images: BTreeMap<String, String>,
}

/// A finalized bundle on disk.
#[derive(Debug, Clone)]
pub struct ArtifactBundle {
    pub dir: PathBuf,
    pub run: RunRecord,
    pub summary: DatasetSummary,
}

struct Writer {
    root: PathBuf,
    digests: BTreeMap<String, String>,
}

impl Writer {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> std::io::Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_synced(&path, bytes)?;
        self.digests.insert(rel.to_string(), format!("{:x}", Sha256::digest(bytes)));
        Ok(())
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Peak resident set size of this process (Linux `VmHWM`).
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Reads the manifest and embeddings named by `config`, running the
/// external embedder first when one is configured and the sidecar is
/// missing.
pub fn ingest(config: &RunConfig) -> Result<DatasetHandle, PipelineError> {
    let splits = config.split_names()?;
    let manifest =
        crate::dataset::read_manifest(&config.manifest, &splits).map_err(|e| stage_err("ingest", e))?;
    if let Some(embedder) = &config.embedder {
        if !config.embeddings_meta.exists() || !config.embeddings_bin.exists() {
            let root = config.image_root.clone().unwrap_or_else(|| {
                config.manifest.parent().map(Path::to_path_buf).unwrap_or_default()
            });
            embedder
                .run(&manifest, &root, &config.embeddings_meta, &config.embeddings_bin)
                .map_err(|e| stage_err("embed", e))?;
        }
    }
    let embeddings = crate::dataset::load_embeddings(
        &config.embeddings_meta,
        &config.embeddings_bin,
        manifest.len(),
    )
    .map_err(|e| stage_err("ingest", e))?;
    let handle = DatasetHandle::new(manifest, embeddings, splits).map_err(|e| stage_err("ingest", e))?;
    Ok(if config.normalize {
        handle.with_normalized_embeddings()
    } else {
        handle
    })
}

fn prepare_output(config: &RunConfig) -> Result<(), PipelineError> {
    let out = &config.output_dir;
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", out.display())))?
            .next()
            .is_some();
        if non_empty {
            if !config.overwrite {
                return Err(PipelineError::Config(format!(
                    "output directory {} is not empty (set overwrite to replace it)",
                    out.display()
                )));
            }
            std::fs::remove_dir_all(out)
                .map_err(|e| PipelineError::Config(format!("cannot clear {}: {e}", out.display())))?;
        }
    }
    std::fs::create_dir_all(out)
        .map_err(|e| PipelineError::Config(format!("cannot create {}: {e}", out.display())))
}

/// Where the partial outputs of a failed run are moved.
pub fn quarantine_dir(output_dir: &Path) -> PathBuf {
    let mut name = output_dir.file_name().unwrap_or_default().to_os_string();
    name.push(".quarantine");
    output_dir.with_file_name(name)
}

/// Runs every stage for every configured `k` and finalizes the bundle.
///
/// Config problems are reported before any computation. If a later stage
/// fails, whatever was written is moved to [`quarantine_dir`] and the error
/// names the stage; the bundle is never marked finalized.
pub fn run_all(config: &RunConfig) -> Result<ArtifactBundle, PipelineError> {
    let splits = config.split_names()?;
    let meta = EmbeddingMeta::read(&config.embeddings_meta)
        .map_err(|e| PipelineError::Config(e.to_string()));
    let declared_n = match (&config.embedder, meta) {
        (_, Ok(meta)) => meta.count,
        (Some(_), Err(_)) => {
            crate::dataset::read_manifest(&config.manifest, &splits)
                .map_err(|e| PipelineError::Config(e.to_string()))?
                .len()
        }
        (None, Err(e)) => return Err(e),
    };
    config.validate(declared_n)?;
    prepare_output(config)?;

    let threads = config.effective_threads();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let result = pool.install(|| run_stages(config, threads));
    if let Err(err) = &result {
        let quarantine = quarantine_dir(&config.output_dir);
        let _ = std::fs::remove_dir_all(&quarantine);
        if std::fs::rename(&config.output_dir, &quarantine).is_err() {
            eprintln!("could not quarantine {}", config.output_dir.display());
        }
        eprintln!("run failed: {err}; partial outputs in {}", quarantine.display());
    }
    result
}

fn run_stages(config: &RunConfig, threads: usize) -> Result<ArtifactBundle, PipelineError> {
    let started = now_ms();
    let mut stages = Vec::new();
    let mut timed = |name: String, start: Instant| {
        stages.push(StageTiming {
            name,
            wall_ms: start.elapsed().as_millis() as u64,
            peak_rss_bytes: peak_rss_bytes(),
        });
    };
    let mut out = Writer {
        root: config.output_dir.clone(),
        digests: BTreeMap::new(),
    };
    let io = |stage: &'static str| move |e: std::io::Error| stage_err(stage, e);

    let t = Instant::now();
    let dataset = ingest(config)?;
    let records = dataset.manifest();
    let x = dataset.embeddings();
    let mut manifest_bytes = Vec::new();
    write_manifest(&mut manifest_bytes, records, dataset.split_names()).map_err(io("ingest"))?;
    out.put(MANIFEST_FILE, &manifest_bytes).map_err(io("ingest"))?;
    timed("ingest".into(), t);

    let t = Instant::now();
    let (media, thumbnail_failures) = write_media(config, records, &mut out)?;
    out.put(MEDIA_FILE, &to_bytes(&media)).map_err(io("thumbnails"))?;
    timed("thumbnails".into(), t);

    let t = Instant::now();
    let flags = dataset_flags(x, records, config.knn_k);
    out.put(FLAGS_FILE, &flag_bitsets(records, &flags)).map_err(io("flags"))?;
    timed("flags".into(), t);

    let t = Instant::now();
    let summary = dataset_summary(x, records, &flags, config.knn_k).map_err(|e| stage_err("summary", e))?;
    let covariance_file = match (&summary.cov_left, &summary.cov_right) {
        (Some(l), Some(r)) => {
            let mut bytes = Vec::with_capacity((l.len() + r.len()) * 8);
            for v in l.iter().chain(r) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            out.put(COVARIANCE_FILE, &bytes).map_err(io("summary"))?;
            Some(COVARIANCE_FILE)
        }
        _ => None,
    };
    let summary_record = summary.to_record(covariance_file);
    timed("summary".into(), t);

    let sides = dataset.sides();
    for &k in &config.k_list {
        let t = Instant::now();
        let params = KMeansParams {
            k,
            seed: config.seed,
            tol: config.kmeans.tol,
            max_iter: config.kmeans.max_iter,
        };
        let clustering = kmeans(x, &params).map_err(|e| stage_err(&format!("cluster k={k}"), e))?;
        write_clustering(&mut out, &clustering).map_err(|e| stage_err(&format!("cluster k={k}"), e))?;
        timed(format!("cluster k={k}"), t);

        let t = Instant::now();
        let rows = cluster_metrics(&clustering.assignments, k, &flags, x, records)
            .map_err(|e| stage_err(&format!("metrics k={k}"), e))?;
        let metrics = MetricsFile {
            clusters: rows.iter().map(|r| r.to_record()).collect(),
            summary: summary_record.clone(),
        };
        out.put(&metrics_file(k), &to_bytes(&metrics))
            .map_err(|e| stage_err(&format!("metrics k={k}"), e))?;
        timed(format!("metrics k={k}"), t);

        let t = Instant::now();
        let stage = format!("project k={k}");
        let projections = project_bundle(&clustering, x, &config.umap_params(), config.projection.sample_fit)
            .map_err(|e| stage_err(&stage, e))?;
        out.put(
            &projection_clusters_file(k),
            &to_bytes(&ProjectionRecord::from_projection(&projections.centroids, None)),
        )
        .map_err(|e| stage_err(&stage, e))?;
        let dir = projection_samples_dir(k);
        for (cluster, p) in projections.samples.iter().enumerate() {
            let bytes = to_bytes(&ProjectionRecord::from_projection(p, Some(&sides)));
            out.put(&format!("{dir}/{cluster}.json"), &bytes)
                .map_err(|e| stage_err(&stage, e))?;
        }
        sync_dir(&config.output_dir.join(&dir)).map_err(|e| stage_err(&stage, e))?;
        timed(stage, t);
    }

    let t = Instant::now();
    let config_hash = config.hash();
    let mut run = RunRecord {
        tool: "ravel".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        config_hash: config_hash.clone(),
        threads,
        split_names: dataset.split_names().clone(),
        k_list: config.k_list.clone(),
        knn_k: config.knn_k,
        embedding_name: x.embedding_name().to_string(),
        n_total: x.n(),
        dim: x.d(),
        started_unix_ms: started,
        finished_unix_ms: 0,
        stages: Vec::new(),
        thumbnail_failures,
        artifacts: out.digests.clone(),
    };
    timed("finalize".into(), t);
    run.stages = stages;
    run.finished_unix_ms = now_ms();
    let run_path = config.output_dir.join(RUN_FILE);
    write_synced(&run_path, &pretty_bytes(&run)).map_err(io("finalize"))?;
    sync_dir(&config.output_dir).map_err(io("finalize"))?;
    write_synced(
        &config.output_dir.join(FINALIZED_MARKER),
        format!("{config_hash}\n").as_bytes(),
    )
    .map_err(io("finalize"))?;
    sync_dir(&config.output_dir).map_err(io("finalize"))?;

    Ok(ArtifactBundle {
        dir: config.output_dir.clone(),
        run,
        summary,
    })
}

fn write_clustering(out: &mut Writer, clustering: &ClusteringResult) -> std::io::Result<()> {
    let k = clustering.k;
    let centroids: Vec<f32> = clustering.centroids.iter().map(|&v| v as f32).collect();
    out.put(&centroids_file(k), &f32s_to_le_bytes(&centroids))?;
    let record = ClustersRecord {
        k,
        assignments: clustering.assignments.clone(),
        inertia: clustering.inertia,
        iterations_run: clustering.iterations_run,
        centroid_file: centroids_file(k),
    };
    out.put(&clusters_file(k), &to_bytes(&record))
}

/// Two bitsets of `n` bits each, LSB-first, indexed by manifest row:
/// precision flags (right-split rows) then recall flags (left-split rows).
/// Rows of the other split, and undefined flags, are 0.
pub fn flag_bitsets(records: &[ImageRecord], flags: &PerImageFlags) -> Vec<u8> {
    let n = records.len();
    let bytes = n.div_ceil(8);
    let mut out = vec![0u8; 2 * bytes];
    let mut local = [0usize; 2];
    for r in records {
        let side = r.split as usize;
        let i = local[side];
        local[side] += 1;
        let (offset, set) = match r.split {
            Side::Right => (0, flags.precision.as_ref().map_or(false, |f| f[i])),
            Side::Left => (bytes, flags.recall.as_ref().map_or(false, |f| f[i])),
        };
        if set {
            out[offset + r.row / 8] |= 1 << (r.row % 8);
        }
    }
    out
}

/// Decodes [`flag_bitsets`] into per-row `(precision, recall)` bits.
pub fn read_flag_bitsets(bytes: &[u8], n: usize) -> Option<Vec<(bool, bool)>> {
    let len = n.div_ceil(8);
    if bytes.len() != 2 * len {
        return None;
    }
    Some(
        (0..n)
            .map(|row| {
                let bit = |offset: usize| bytes[offset + row / 8] >> (row % 8) & 1 == 1;
                (bit(0), bit(len))
            })
            .collect(),
    )
}

fn write_media(
    config: &RunConfig,
    records: &[ImageRecord],
    out: &mut Writer,
) -> Result<(MediaIndex, Vec<String>), PipelineError> {
    let mut media = MediaIndex::default();
    let mut failures = Vec::new();
    let Some(root) = &config.image_root else {
        return Ok((media, failures));
    };
    let rendered: Vec<(usize, Result<Vec<u8>, String>, Option<Vec<u8>>)> = records
        .par_iter()
        .enumerate()
        .filter_map(|(i, r)| r.path.as_ref().map(|p| (i, root.join(p))))
        .map(|(i, path)| match std::fs::read(&path) {
            Ok(bytes) => {
                let thumb = if config.thumbnails {
                    make_thumbnail(&bytes, DEFAULT_THUMBNAIL_EDGE)
                        .map(|t| t.bytes)
                        .map_err(|e| e.to_string())
                } else {
                    Err("thumbnails disabled".into())
                };
                (i, thumb, Some(bytes))
            }
            Err(e) => (i, Err(e.to_string()), None),
        })
        .collect();
    for (i, thumb, original) in rendered {
        let record = &records[i];
        let stem = file_stem_for_id(&record.id);
        match original {
            Some(bytes) => {
                let ext = Path::new(record.path.as_deref().unwrap_or_default())
                    .extension()
                    .and_then(|e| e.to_str())
                    .map(|e| e.to_ascii_lowercase())
                    .unwrap_or_else(|| "bin".into());
                let rel = format!("images/{stem}.{ext}");
                out.put(&rel, &bytes).map_err(|e| stage_err("thumbnails", e))?;
                media.images.insert(record.id.clone(), rel);
            }
            None => {
                failures.push(record.id.clone());
                continue;
            }
        }
        match thumb {
            Ok(bytes) => {
                let rel = format!("thumbs/{stem}.jpg");
                out.put(&rel, &bytes).map_err(|e| stage_err("thumbnails", e))?;
                media.thumbnails.insert(record.id.clone(), rel);
            }
            Err(_) if !config.thumbnails => {}
            Err(_) => failures.push(record.id.clone()),
        }
    }
    for sub in ["images", "thumbs"] {
        let dir = config.output_dir.join(sub);
        if dir.exists() {
            sync_dir(&dir).map_err(|e| stage_err("thumbnails", e))?;
        }
    }
    Ok((media, failures))
}

/// Summary of a bundle directory, as printed by `ravel inspect`.
pub fn inspect(dir: &Path) -> Result<serde_json::Value, PipelineError> {
    let read = |name: &str| -> Result<Vec<u8>, PipelineError> {
        std::fs::read(dir.join(name)).map_err(|e| stage_err("inspect", format!("{name}: {e}")))
    };
    let run: RunRecord = serde_json::from_slice(&read(RUN_FILE)?).map_err(|e| stage_err("inspect", e))?;
    let finalized = std::fs::read_to_string(dir.join(FINALIZED_MARKER))
        .map(|s| s.trim() == run.config_hash)
        .unwrap_or(false);
    let mut per_k = serde_json::Map::new();
    let mut summary = None;
    for &k in &run.k_list {
        let metrics: MetricsFile =
            serde_json::from_slice(&read(&metrics_file(k))?).map_err(|e| stage_err("inspect", e))?;
        per_k.insert(k.to_string(), serde_json::json!({ "clusters": metrics.clusters.len() }));
        summary.get_or_insert(metrics.summary);
    }
    let summary = summary.ok_or_else(|| stage_err("inspect", "bundle has no k"))?;
    Ok(serde_json::json!({
        "finalized": finalized,
        "n_total": summary.n_total,
        "n_left": summary.n_left,
        "n_right": summary.n_right,
        "split_names": run.split_names,
        "embedding_name": summary.embedding_name,
        "frechet_distance": summary.frechet_distance,
        "precision": summary.precision,
        "recall": summary.recall,
        "undefined": summary.undefined,
        "knn_k": summary.knn_k,
        "k": per_k,
    }))
}

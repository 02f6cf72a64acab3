//! Two-split dataset ingest: the JSONL manifest, the binary embedding
//! sidecar and sample-viewer thumbnails.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use image::codecs::jpeg::JpegEncoder;
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest thumbnail edge in pixels.
pub const DEFAULT_THUMBNAIL_EDGE: u32 = 150;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("manifest line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("manifest line {line}: unknown split {value:?} (declared splits are {left:?} and {right:?})")]
    UnknownSplit {
        line: usize,
        value: String,
        left: String,
        right: String,
    },
    #[error("manifest has no records for split {0:?}")]
    MissingSplit(String),
    #[error("split names must be two distinct non-empty strings, got {0:?} and {1:?}")]
    BadSplitNames(String, String),
    #[error("embedding descriptor: {0}")]
    BadDescriptor(String),
    #[error("embedding file holds {actual} bytes but {count}x{dim} f32 needs {expected}")]
    ByteLength {
        count: usize,
        dim: usize,
        expected: usize,
        actual: usize,
    },
    #[error("embedding count {actual} does not match the {expected} manifest records")]
    CountMismatch { expected: usize, actual: usize },
    #[error("embedding row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("dataset: {0}")]
    Inconsistent(String),
    #[error("thumbnail: {0}")]
    Thumbnail(#[from] image::ImageError),
    #[error("external embedder failed: {0}")]
    Embedder(String),
}

impl IngestError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Which of the two compared data sources an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

/// Human-readable names of the left (baseline) and right (compared) splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitNames {
    pub left: String,
    pub right: String,
}

impl SplitNames {
    pub fn new(left: impl Into<String>, right: impl Into<String>) -> Result<Self, IngestError> {
        let (left, right) = (left.into(), right.into());
        if left.is_empty() || right.is_empty() || left == right {
            return Err(IngestError::BadSplitNames(left, right));
        }
        Ok(SplitNames { left, right })
    }

    pub fn side_of(&self, name: &str) -> Option<Side> {
        if name == self.left {
            Some(Side::Left)
        } else if name == self.right {
            Some(Side::Right)
        } else {
            None
        }
    }

    pub fn name(&self, side: Side) -> &str {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub split: Side,
    pub path: Option<String>,
    pub label: Option<String>,
    /// Row of this image in the embedding matrix.
    pub row: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

/// Parses a line-delimited manifest. Blank lines are skipped; rows are
/// assigned in file order.
pub fn parse_manifest<R: Read>(
    reader: R,
    splits: &SplitNames,
) -> Result<Vec<ImageRecord>, IngestError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| IngestError::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine =
            serde_json::from_str(&line).map_err(|e| IngestError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        if parsed.id.is_empty() {
            return Err(IngestError::MalformedLine {
                line: line_no,
                message: "empty id".into(),
            });
        }
        let split = splits
            .side_of(&parsed.split)
            .ok_or_else(|| IngestError::UnknownSplit {
                line: line_no,
                value: parsed.split.clone(),
                left: splits.left.clone(),
                right: splits.right.clone(),
            })?;
        if !seen.insert(parsed.id.clone()) {
            return Err(IngestError::DuplicateId {
                line: line_no,
                id: parsed.id,
            });
        }
        records.push(ImageRecord {
            row: records.len(),
            id: parsed.id,
            split,
            path: parsed.path,
            label: parsed.label,
        });
    }
    for side in [Side::Left, Side::Right] {
        if !records.iter().any(|r| r.split == side) {
            return Err(IngestError::MissingSplit(splits.name(side).to_string()));
        }
    }
    Ok(records)
}

pub fn read_manifest(path: &Path, splits: &SplitNames) -> Result<Vec<ImageRecord>, IngestError> {
    let file = std::fs::File::open(path).map_err(|e| IngestError::io(path, e))?;
    parse_manifest(file, splits)
}

/// Writes records back out in the manifest format, one object per line.
pub fn write_manifest<W: Write>(
    mut out: W,
    records: &[ImageRecord],
    splits: &SplitNames,
) -> std::io::Result<()> {
    for record in records {
        let line = ManifestLine {
            id: record.id.clone(),
            split: splits.name(record.split).to_string(),
            path: record.path.clone(),
            label: record.label.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Contents of `embeddings.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub count: usize,
    pub dim: usize,
    pub dtype: String,
    pub order: String,
    pub endianness: String,
    pub embedding_name: String,
}

impl EmbeddingMeta {
    pub fn f32_row_major(count: usize, dim: usize, embedding_name: impl Into<String>) -> Self {
        EmbeddingMeta {
            count,
            dim,
            dtype: "f32".into(),
            order: "row-major".into(),
            endianness: "little".into(),
            embedding_name: embedding_name.into(),
        }
    }

    fn validate(&self) -> Result<(), IngestError> {
        if self.dtype != "f32" {
            return Err(IngestError::BadDescriptor(format!("unsupported dtype {:?}", self.dtype)));
        }
        if self.order != "row-major" {
            return Err(IngestError::BadDescriptor(format!("unsupported order {:?}", self.order)));
        }
        if self.endianness != "little" {
            return Err(IngestError::BadDescriptor(format!(
                "unsupported endianness {:?}",
                self.endianness
            )));
        }
        if self.dim < 2 {
            return Err(IngestError::BadDescriptor(format!("dim must be at least 2, got {}", self.dim)));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, IngestError> {
        let bytes = std::fs::read(path).map_err(|e| IngestError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| IngestError::BadDescriptor(e.to_string()))
    }
}

/// Dense row-major `n x d` embedding matrix. Row `i` belongs to manifest row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    data: Vec<f32>,
    embedding_name: String,
}

impl EmbeddingMatrix {
    pub fn new(
        data: Vec<f32>,
        n: usize,
        d: usize,
        embedding_name: impl Into<String>,
    ) -> Result<Self, IngestError> {
        if d < 2 {
            return Err(IngestError::BadDescriptor(format!("dim must be at least 2, got {d}")));
        }
        if data.len() != n * d {
            return Err(IngestError::ByteLength {
                count: n,
                dim: d,
                expected: n * d * 4,
                actual: data.len() * 4,
            });
        }
        if let Some(row) = data
            .chunks_exact(d)
            .position(|r| r.iter().any(|v| !v.is_finite()))
        {
            return Err(IngestError::NonFinite { row });
        }
        Ok(EmbeddingMatrix {
            n,
            d,
            data,
            embedding_name: embedding_name.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn embedding_name(&self) -> &str {
        &self.embedding_name
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Copies the given rows into a new contiguous buffer.
    pub fn gather(&self, rows: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            out.extend_from_slice(self.row(r));
        }
        out
    }

    /// Scales every row to unit Euclidean norm; zero rows are left unchanged.
    pub fn l2_normalized(&self) -> EmbeddingMatrix {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.d) {
            let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v = (f64::from(*v) / norm) as f32;
                }
            }
        }
        EmbeddingMatrix {
            data,
            ..self.clone()
        }
    }

    pub fn meta(&self) -> EmbeddingMeta {
        EmbeddingMeta::f32_row_major(self.n, self.d, self.embedding_name.clone())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        f32s_to_le_bytes(&self.data)
    }
}

pub(crate) fn f32s_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a sidecar pair already in memory.
pub fn decode_embeddings(
    meta: &EmbeddingMeta,
    bytes: &[u8],
    expected_n: usize,
) -> Result<EmbeddingMatrix, IngestError> {
    meta.validate()?;
    let expected = meta.count * meta.dim * 4;
    if bytes.len() != expected {
        return Err(IngestError::ByteLength {
            count: meta.count,
            dim: meta.dim,
            expected,
            actual: bytes.len(),
        });
    }
    if meta.count != expected_n {
        return Err(IngestError::CountMismatch {
            expected: expected_n,
            actual: meta.count,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    EmbeddingMatrix::new(data, meta.count, meta.dim, meta.embedding_name.clone())
}

pub fn load_embeddings(
    meta_file: &Path,
    bin_file: &Path,
    expected_n: usize,
) -> Result<EmbeddingMatrix, IngestError> {
    let meta = EmbeddingMeta::read(meta_file)?;
    let bytes = std::fs::read(bin_file).map_err(|e| IngestError::io(bin_file, e))?;
    decode_embeddings(&meta, &bytes, expected_n)
}

/// Writes `meta_file` and `bin_file` for `matrix`.
pub fn write_embeddings(
    matrix: &EmbeddingMatrix,
    meta_file: &Path,
    bin_file: &Path,
) -> Result<(), IngestError> {
    let meta = serde_json::to_vec_pretty(&matrix.meta()).expect("meta serializes");
    std::fs::write(meta_file, meta).map_err(|e| IngestError::io(meta_file, e))?;
    std::fs::write(bin_file, matrix.to_le_bytes()).map_err(|e| IngestError::io(bin_file, e))
}

/// A validated, immutable two-split dataset.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    manifest: Vec<ImageRecord>,
    embeddings: EmbeddingMatrix,
    split_names: SplitNames,
    label_index: BTreeMap<String, Vec<usize>>,
}

impl DatasetHandle {
    pub fn new(
        manifest: Vec<ImageRecord>,
        embeddings: EmbeddingMatrix,
        split_names: SplitNames,
    ) -> Result<Self, IngestError> {
        if manifest.len() != embeddings.n() {
            return Err(IngestError::CountMismatch {
                expected: manifest.len(),
                actual: embeddings.n(),
            });
        }
        let mut ids = HashSet::with_capacity(manifest.len());
        for (i, record) in manifest.iter().enumerate() {
            if record.row != i {
                return Err(IngestError::Inconsistent(format!(
                    "record {:?} has row {} at position {i}",
                    record.id, record.row
                )));
            }
            if !ids.insert(record.id.as_str()) {
                return Err(IngestError::Inconsistent(format!("duplicate id {:?}", record.id)));
            }
        }
        for side in [Side::Left, Side::Right] {
            if !manifest.iter().any(|r| r.split == side) {
                return Err(IngestError::MissingSplit(split_names.name(side).to_string()));
            }
        }
        let mut label_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for record in &manifest {
            if let Some(label) = &record.label {
                label_index.entry(label.clone()).or_default().push(record.row);
            }
        }
        Ok(DatasetHandle {
            manifest,
            embeddings,
            split_names,
            label_index,
        })
    }

    /// Reads and validates a manifest plus embedding sidecar from disk.
    pub fn load(
        manifest_file: &Path,
        meta_file: &Path,
        bin_file: &Path,
        split_names: SplitNames,
    ) -> Result<Self, IngestError> {
        let manifest = read_manifest(manifest_file, &split_names)?;
        let embeddings = load_embeddings(meta_file, bin_file, manifest.len())?;
        DatasetHandle::new(manifest, embeddings, split_names)
    }

    pub fn manifest(&self) -> &[ImageRecord] {
        &self.manifest
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn split_names(&self) -> &SplitNames {
        &self.split_names
    }

    pub fn label_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.label_index
    }

    /// Rows without a label, in manifest order.
    pub fn unlabeled_rows(&self) -> Vec<usize> {
        self.manifest
            .iter()
            .filter(|r| r.label.is_none())
            .map(|r| r.row)
            .collect()
    }

    /// Rows of one split, in manifest order.
    pub fn split_rows(&self, side: Side) -> Vec<usize> {
        self.manifest
            .iter()
            .filter(|r| r.split == side)
            .map(|r| r.row)
            .collect()
    }

    pub fn sides(&self) -> Vec<Side> {
        self.manifest.iter().map(|r| r.split).collect()
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    /// Same dataset with L2-normalized embeddings.
    pub fn with_normalized_embeddings(&self) -> DatasetHandle {
        DatasetHandle {
            embeddings: self.embeddings.l2_normalized(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Thumbnail {
    pub width: u32,
    pub height: u32,
    /// JPEG-encoded bytes.
    pub bytes: Vec<u8>,
}

/// Output size for a thumbnail: the longest edge becomes
/// `min(max_edge, longest)`, aspect ratio kept, never upscaled.
pub fn thumbnail_dimensions(width: u32, height: u32, max_edge: u32) -> (u32, u32) {
    let longest = width.max(height);
    if longest <= max_edge || longest == 0 {
        return (width, height);
    }
    let scale = |edge: u32| -> u32 {
        let scaled = (u64::from(edge) * u64::from(max_edge) + u64::from(longest) / 2) / u64::from(longest);
        (scaled as u32).max(1)
    };
    if width >= height {
        (max_edge, scale(height))
    } else {
        (scale(width), max_edge)
    }
}

pub fn make_thumbnail(image_bytes: &[u8], max_edge: u32) -> Result<Thumbnail, IngestError> {
    let img = image::load_from_memory(image_bytes)?;
    let (w, h) = thumbnail_dimensions(img.width(), img.height(), max_edge);
    let resized = if (w, h) == (img.width(), img.height()) {
        img
    } else {
        img.resize_exact(w, h, FilterType::Triangle)
    };
    let rgb = resized.to_rgb8();
    let mut bytes = Vec::new();
    JpegEncoder::new_with_quality(&mut bytes, 85).encode_image(&rgb)?;
    Ok(Thumbnail {
        width: w,
        height: h,
        bytes,
    })
}

/// Maps an image id onto a safe file stem: bytes outside `[A-Za-z0-9._-]`
/// are written as `%XX`, and a leading `.` is escaped too.
pub fn file_stem_for_id(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for (i, b) in id.bytes().enumerate() {
        let safe = b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || (b == b'.' && i > 0);
        if safe {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// A user-supplied command that embeds images.
///
/// It is invoked as `program args... <image_list> <meta_out> <bin_out>` where
/// `image_list` holds one absolute image path per line in manifest order. The
/// command must write an embedding sidecar pair to the two output paths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalEmbedder {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl ExternalEmbedder {
    pub fn run(
        &self,
        records: &[ImageRecord],
        image_root: &Path,
        meta_out: &Path,
        bin_out: &Path,
    ) -> Result<(), IngestError> {
        let mut list = String::new();
        for record in records {
            let path = record.path.as_ref().ok_or_else(|| {
                IngestError::Embedder(format!("record {:?} has no image path", record.id))
            })?;
            list.push_str(&image_root.join(path).to_string_lossy());
            list.push('\n');
        }
        if let Some(parent) = meta_out.parent() {
            std::fs::create_dir_all(parent).map_err(|e| IngestError::io(parent, e))?;
        }
        let list_file = meta_out.with_extension("images.txt");
        std::fs::write(&list_file, list).map_err(|e| IngestError::io(&list_file, e))?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&list_file)
            .arg(meta_out)
            .arg(bin_out)
            .status()
            .map_err(|e| IngestError::Embedder(format!("could not start {:?}: {e}", self.program)))?;
        if !status.success() {
            return Err(IngestError::Embedder(format!("{:?} exited with {status}", self.program)));
        }
        Ok(())
    }
}

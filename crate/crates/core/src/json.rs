//! Deterministic JSON and durable file writes for bundle artifacts.
//!
//! Structs serialize in declaration order and floats use shortest
//! round-trip formatting, so equal values always produce equal bytes.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

pub(crate) fn to_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec(value).expect("artifact types serialize");
    bytes.push(b'\n');
    bytes
}

pub(crate) fn pretty_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact types serialize");
    bytes.push(b'\n');
    bytes
}

/// Writes `bytes` to `path` and flushes them to stable storage.
pub(crate) fn write_synced(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut file = File::create(path)?;
    file.write_all(bytes)?;
    file.sync_all()
}

pub(crate) fn sync_dir(path: &Path) -> std::io::Result<()> {
    File::open(path)?.sync_all()
}

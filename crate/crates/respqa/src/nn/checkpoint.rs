//! Checkpoint format: a JSON manifest describing parameter names, shapes,
//! byte offsets, and frozen/trainable flags, next to one little-endian
//! f64 binary blob. Round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Number of f64 elements.
    pub len: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub params: Vec<ManifestEntry>,
    /// Free-form metadata (config snapshot, epoch, validation metric).
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// Write `params` (in the given order) to `dir/manifest.json` + `dir/params.bin`.
/// Frozen flags are derived from `requires_grad`.
pub fn save(
    dir: &Path,
    params: &[(String, Tensor)],
    meta: BTreeMap<String, serde_json::Value>,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(params.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in params {
        let data = t.to_vec();
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len() as u64,
            len: data.len(),
            frozen: !t.requires_grad(),
        });
        for v in &data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { params: entries, meta };
    let mut mf = fs::File::create(dir.join(MANIFEST_FILE))?;
    mf.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    mf.write_all(b"\n")?;
    fs::File::create(dir.join(BLOB_FILE))?.write_all(&blob)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load all parameter buffers keyed by name.
pub fn load(dir: &Path) -> Result<(Manifest, BTreeMap<String, Vec<f64>>), CheckpointError> {
    let manifest = read_manifest(dir)?;
    let mut blob = Vec::new();
    fs::File::open(dir.join(BLOB_FILE))?.read_to_end(&mut blob)?;
    let mut out = BTreeMap::new();
    for e in &manifest.params {
        if e.dtype != "f64" {
            return Err(CheckpointError::Mismatch(format!(
                "{}: unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let start = e.offset as usize;
        let end = start + e.len * 8;
        if end > blob.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{}: blob truncated ({} < {})",
                e.name,
                blob.len(),
                end
            )));
        }
        let mut data = Vec::with_capacity(e.len);
        for chunk in blob[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        out.insert(e.name.clone(), data);
    }
    Ok((manifest, out))
}

/// Copy loaded buffers into live tensors, enforcing name/shape agreement.
pub fn restore(
    params: &[(String, Tensor)],
    manifest: &Manifest,
    buffers: &BTreeMap<String, Vec<f64>>,
) -> Result<(), CheckpointError> {
    let by_name: BTreeMap<&str, &ManifestEntry> =
        manifest.params.iter().map(|e| (e.name.as_str(), e)).collect();
    for (name, t) in params {
        let entry = by_name.get(name.as_str()).ok_or_else(|| {
            CheckpointError::Mismatch(format!("parameter {name} missing from checkpoint"))
        })?;
        if entry.shape != t.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "{name}: shape {:?} != checkpoint {:?}",
                t.shape(),
                entry.shape
            )));
        }
        if entry.frozen != !t.requires_grad() {
            return Err(CheckpointError::Mismatch(format!(
                "{name}: frozen flag disagrees with checkpoint"
            )));
        }
        t.set_data(buffers[&entry.name].clone());
    }
    Ok(())
}

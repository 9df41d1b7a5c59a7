//! Parameter checkpoints: a JSON manifest next to a blob of little-endian
//! `f64` values.
//!
//! `model.json` lists every parameter's name, shape and element offset into
//! `model.bin`; the manifest can also carry free-form metadata (model
//! configuration, vocabulary). Values round-trip bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "iskg-params";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the blob.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub blob: String,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Paths of the manifest and blob for a checkpoint base path
/// (`dir/model` → `dir/model.json`, `dir/model.bin`).
pub fn checkpoint_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

/// Serializes the store into `(manifest, blob)` without touching disk.
pub fn encode(store: &ParamStore, metadata: serde_json::Value, blob_name: &str) -> (Manifest, Vec<u8>) {
    let mut params = Vec::with_capacity(store.len());
    let mut blob = Vec::with_capacity(store.num_scalars() * 8);
    let mut offset = 0;
    for (_, p) in store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            len: p.value.len(),
        });
        offset += p.value.len();
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        dtype: "f64-le".to_string(),
        blob: blob_name.to_string(),
        params,
        metadata,
    };
    (manifest, blob)
}

pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<ParamStore> {
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(NumericsError::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.dtype != "f64-le" {
        return Err(NumericsError::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
    }
    if !blob.len().is_multiple_of(8) {
        return Err(NumericsError::Checkpoint("blob length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let end = entry.offset + entry.len;
        if end > values.len() || entry.shape.iter().product::<usize>() != entry.len {
            return Err(NumericsError::Checkpoint(format!("bad extent for {}", entry.name)));
        }
        let t = Tensor::new(entry.shape.clone(), values[entry.offset..end].to_vec())?;
        store.add(entry.name.clone(), t);
    }
    Ok(store)
}

pub fn save(store: &ParamStore, metadata: serde_json::Value, base: &Path) -> Result<()> {
    let (json_path, bin_path) = checkpoint_paths(base);
    let blob_name = bin_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| NumericsError::Checkpoint("bad checkpoint path".into()))?
        .to_string();
    let (manifest, blob) = encode(store, metadata, &blob_name);
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&bin_path, blob)?;
    fs::write(&json_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(base: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let (json_path, _) = checkpoint_paths(base);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&json_path)?)?;
    let bin_path = json_path.with_file_name(&manifest.blob);
    let blob = fs::read(bin_path)?;
    let store = decode(&manifest, &blob)?;
    Ok((store, manifest.metadata))
}

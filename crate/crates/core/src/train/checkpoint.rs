//! Checkpoints: a JSON manifest next to a blob of little-endian f32 arrays.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, WavLm};
use crate::numeric::{ParamStore, Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Steps completed; the next step uses stream `step`.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub rng: RngState,
    pub blob: String,
}

impl CheckpointManifest {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len).sum()
    }
}

fn blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

/// Manifest entries of `store` in registration order, packed back to back.
pub fn param_entries<T: Real>(store: &ParamStore<T>) -> Vec<ParamEntry> {
    let mut offset = 0;
    store
        .iter()
        .map(|p| {
            let e = ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
                len: p.value.len(),
            };
            offset += e.len;
            e
        })
        .collect()
}

/// Writes `path` (manifest) and a sibling `.bin` blob.
pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    model: &WavLm,
    store: &ParamStore<T>,
    rng: RngState,
) -> Result<CheckpointManifest> {
    let path = path.as_ref();
    let blob = blob_path(path);
    let params = param_entries(store);
    let mut bytes = Vec::with_capacity(store.num_elements() * 4);
    for p in store.iter() {
        for v in p.value.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        params,
        rng,
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Checkpoint(format!("no file name in {}", path.display())))?,
    };
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Rebuilds the model from the manifest and fills every parameter from the
/// blob. Every live parameter must appear exactly once with its shape.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(WavLm, ParamStore<f32>, CheckpointManifest)> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let blob = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let available = bytes.len() / 4;

    let (model, mut store) = WavLm::init::<f32>(&manifest.config, 0)?;
    let mut seen = HashSet::new();
    for entry in &manifest.params {
        if !seen.insert(entry.name.as_str()) {
            return Err(Error::Checkpoint(format!("parameter {} listed twice", entry.name)));
        }
        let id = store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        let live = store.value(id).shape().to_vec();
        if live != entry.shape || entry.len != entry.shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?} (len {}), model expects {live:?}",
                entry.name, entry.shape, entry.len
            )));
        }
        if entry.offset + entry.len > available {
            return Err(Error::Checkpoint(format!(
                "blob {} ends before parameter {} (needs elements {}..{}, has {available})",
                blob.display(),
                entry.name,
                entry.offset,
                entry.offset + entry.len
            )));
        }
        let data = bytes[entry.offset * 4..(entry.offset + entry.len) * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.get_mut(id).value = Tensor::new(&entry.shape, data)?;
    }
    if let Some(missing) = store.iter().find(|p| !seen.contains(p.name.as_str())) {
        return Err(Error::Checkpoint(format!(
            "checkpoint lacks parameter {}",
            missing.name
        )));
    }
    Ok((model, store, manifest))
}

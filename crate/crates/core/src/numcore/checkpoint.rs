//! Checkpoint files: `<stem>.json` descriptor plus `<stem>.bin` holding the
//! parameter values as little-endian `f64`, concatenated in descriptor order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointDescriptor {
    pub version: u32,
    pub kind: String,
    pub blob: String,
    pub params: Vec<ParamEntry>,
    pub hyperparameters: serde_json::Value,
}

pub fn save_checkpoint(
    dir: &Path,
    stem: &str,
    kind: &str,
    params: &ParamStore,
    hyperparameters: &impl Serialize,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob_name = format!("{stem}.bin");
    let descriptor = CheckpointDescriptor {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        blob: blob_name.clone(),
        params: params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        hyperparameters: serde_json::to_value(hyperparameters)?,
    };
    let mut blob = Vec::with_capacity(params.num_values() * 8);
    for t in params.tensors() {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json_path = dir.join(format!("{stem}.json"));
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    fs::write(&json_path, serde_json::to_string_pretty(&descriptor)?)
        .map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

/// Loads `<stem>.json` / its blob and checks version and kind.
pub fn load_checkpoint(dir: &Path, stem: &str, kind: &str) -> Result<(ParamStore, serde_json::Value)> {
    let json_path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let desc: CheckpointDescriptor = serde_json::from_str(&text)?;
    if desc.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {} unsupported (expected {CHECKPOINT_VERSION})",
            json_path.display(),
            desc.version
        )));
    }
    if desc.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{}: holds a {} checkpoint, expected {kind}",
            json_path.display(),
            desc.kind
        )));
    }
    let blob_path = dir.join(&desc.blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let expected: usize = desc.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if bytes.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes, descriptor needs {}",
            blob_path.display(),
            bytes.len(),
            expected * 8
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut store = ParamStore::new();
    for p in &desc.params {
        let n = p.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        store.insert(p.name.clone(), Tensor::new(&p.shape, data)?);
    }
    Ok((store, desc.hyperparameters))
}

//! Checkpoints: `manifest.json` plus `params.bin`, the parameters as
//! consecutive little-endian f32 values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, StageError};
use crate::diff::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into `params.bin`, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub n_features: usize,
    pub lookback: usize,
    pub seed: u64,
    /// Training progress in epochs when the parameters were taken.
    pub epoch: f64,
    /// Free-form metadata (guides, regime).
    #[serde(default)]
    pub extra: serde_json::Value,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(dir: &Path, meta: &CheckpointMeta, params: &ParamStore) -> Result<(), StageError> {
    fs::create_dir_all(dir)?;
    let mut meta = meta.clone();
    meta.seed = params.seed();
    meta.tensors.clear();
    let mut bytes = Vec::with_capacity(params.num_scalars() * 4);
    let mut offset = 0;
    for (name, t) in params.iter() {
        meta.tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += t.numel();
    }
    fs::write(dir.join("params.bin"), bytes)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointMeta, ParamStore), StageError> {
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let bytes = fs::read(dir.join("params.bin"))?;
    let mut store = ParamStore::new(meta.seed);
    for e in &meta.tensors {
        let n: usize = e.shape.iter().product();
        let range = e.offset * 4..(e.offset + n) * 4;
        let raw = bytes.get(range.clone()).ok_or_else(|| {
            StageError::Config(format!(
                "params.bin holds {} bytes, tensor `{}` needs bytes {range:?}",
                bytes.len(),
                e.name
            ))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        store.insert(&e.name, Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok((meta, store))
}

//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `ROBJCKPT`, a little-endian `u32` version, a
//! little-endian `u32` metadata length, that many bytes of JSON metadata
//! (model configuration, iteration, tensor names and shapes), then every
//! tensor as little-endian `f32` in metadata order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use resobj_core::model::{Detector, ModelConfig, ParamSet};
use resobj_core::train::Checkpoint;
use resobj_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ROBJCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: ModelConfig,
    iteration: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let meta = Metadata {
        config: ckpt.model.config.clone(),
        iteration: ckpt.iteration,
        tensors: ckpt
            .model
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    let payload_len = 4 * ckpt.model.params.total_len();
    let mut out = Vec::with_capacity(16 + meta.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for (_, t) in ckpt.model.params.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Decodes a checkpoint. `origin` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let fail = |detail: String| Error::format(origin, detail);
    if bytes.len() < 16 {
        return Err(fail(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let meta_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let meta_end = 16usize
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail("truncated metadata".into()))?;
    let meta: Metadata =
        serde_json::from_slice(&bytes[16..meta_end]).map_err(|e| fail(format!("metadata: {e}")))?;

    let mut expected = 0usize;
    for entry in &meta.tensors {
        let n = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fail(format!("tensor `{}` is too large", entry.name)))?;
        expected = expected
            .checked_add(n)
            .ok_or_else(|| fail("payload size overflows".into()))?;
    }
    let payload = &bytes[meta_end..];
    if payload.len() != 4 * expected {
        return Err(fail(format!(
            "payload has {} bytes, metadata describes {}",
            payload.len(),
            4 * expected
        )));
    }

    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut params = ParamSet::new();
    for entry in meta.tensors {
        let n = entry.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        let t = Tensor::new(entry.shape, data).map_err(|e| fail(e.to_string()))?;
        params.push(entry.name, t);
    }
    let model = Detector::from_params(meta.config, params).map_err(|e| fail(e.to_string()))?;
    Ok(Checkpoint {
        model,
        iteration: meta.iteration,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Loads a checkpoint and adopts its tensors under `config`, failing with
/// the name of the first tensor whose shape does not fit.
pub fn load_checkpoint_for(path: &Path, config: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let model = Detector::from_params(config.clone(), ckpt.model.params)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Checkpoint {
        model,
        iteration: ckpt.iteration,
    })
}

//! Scene dumps: one file per scene holding JSON metadata followed by the
//! `[C, H, W]` input as little-endian `f32`.
//!
//! Layout: the 8-byte magic `ROBJSCNE`, a little-endian `u32` metadata
//! length, the metadata, then the payload.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use resobj_core::anchors::GroundTruth;
use resobj_core::data::{validation_scene, Scene, SceneConfig};
use resobj_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ROBJSCNE";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneMetadata {
    index: u64,
    shape: Vec<usize>,
    objects: Vec<GroundTruth>,
}

pub fn encode_scene(index: u64, scene: &Scene) -> Vec<u8> {
    let meta = serde_json::to_vec(&SceneMetadata {
        index,
        shape: scene.input.shape().to_vec(),
        objects: scene.objects.clone(),
    })
    .expect("metadata serializes");
    let mut out = Vec::with_capacity(12 + meta.len() + 4 * scene.input.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for &v in scene.input.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Returns the scene index and the scene, its input at `f32` precision.
pub fn decode_scene(bytes: &[u8], origin: &Path) -> Result<(u64, Scene)> {
    let fail = |d: &str| Error::format(origin, d);
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(fail("bad magic"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let end = 12usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail("truncated metadata"))?;
    let meta: SceneMetadata =
        serde_json::from_slice(&bytes[12..end]).map_err(|e| Error::format(origin, e.to_string()))?;
    let payload = &bytes[end..];
    let n: usize = meta.shape.iter().product();
    if payload.len() != 4 * n {
        return Err(fail("payload size does not match shape"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let input = Tensor::new(meta.shape, data).map_err(|e| Error::format(origin, e.to_string()))?;
    Ok((
        meta.index,
        Scene {
            input,
            objects: meta.objects,
        },
    ))
}

/// Writes validation scenes `0..count` to `dir` as `scene_{index:05}.bin`.
pub fn dump_validation_scenes(config: &SceneConfig, count: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count as u64)
        .map(|i| {
            let scene = validation_scene(config, i)?;
            let path = dir.join(format!("scene_{i:05}.bin"));
            std::fs::write(&path, encode_scene(i, &scene)).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

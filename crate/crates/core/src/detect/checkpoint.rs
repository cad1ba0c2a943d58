//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "RGBDCKPT"
//! version     u32
//! header_len  u32
//! header      JSON (architecture, variant, seed, channel stats, tensor table)
//! tensors     f32 values of every tensor, in header order
//! checksum    SHA-256 of all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{build_model, ArchConfig, DetectorModel, NamedTensor};
use super::DetectError;
use crate::fusion::{ChannelStats, VariantKind};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RGBDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Metadata stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub channel_stats: Option<ChannelStats>,
    /// Path of the `channel_stats.json` sidecar the stats came from, if any.
    pub channel_stats_ref: Option<String>,
    /// Integer input downscale factor applied before the network.
    pub input_downscale: u32,
    pub epoch: Option<usize>,
    pub val_map: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    variant: VariantKind,
    seed: u64,
    arch: ArchConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

fn corrupt(path: &Path, msg: impl Into<String>) -> DetectError {
    DetectError::Checkpoint { path: path.display().to_string(), msg: msg.into() }
}

pub fn save_checkpoint(model: &DetectorModel, meta: &CheckpointMeta, path: &Path) -> Result<(), DetectError> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        variant: model.variant,
        seed: model.seed,
        arch: model.arch.clone(),
        meta: meta.clone(),
        tensors: model
            .params()
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec() })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(16 + header.len() + model.parameter_count() * 4 + 32);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for p in model.params() {
        for v in p.tensor.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(digest.as_slice());
    fs::write(path, bytes).map_err(|e| corrupt(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<(DetectorModel, CheckpointMeta), DetectError> {
    let bytes = fs::read(path).map_err(|e| corrupt(path, e.to_string()))?;
    if bytes.len() < 16 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt(path, "not a checkpoint file"));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(corrupt(path, "checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let header_end = 16usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&body[16..header_end]).map_err(|e| corrupt(path, e.to_string()))?;
    let mut model = build_model(header.variant, &header.arch, header.seed)?;
    let mut offset = header_end;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + 4 * n;
        if end > body.len() {
            return Err(corrupt(path, "truncated tensor data"));
        }
        let data = body[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        offset = end;
        tensors.push(NamedTensor { name: entry.name, tensor: Tensor::from_vec(&entry.shape, data) });
    }
    if offset != body.len() {
        return Err(corrupt(path, "trailing bytes after tensor data"));
    }
    model.load_params(tensors)?;
    Ok((model, header.meta))
}

/// Rounds every weight to `f32`, the precision checkpoints store.
pub(crate) fn round_to_f32(model: &mut DetectorModel) {
    for p in model.params_mut() {
        for v in p.tensor.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

//! Single-file checkpoint archive.
//!
//! Layout: an 8-byte magic `NMCRLCK1`, a little-endian u64 metadata length,
//! pretty-printed UTF-8 JSON metadata, then all tensor payloads concatenated
//! as little-endian float32. The metadata lists every tensor's name, shape,
//! and byte offset into the payload, in write order (parameter-store
//! insertion order plus derived extras), so two checkpoints can be compared
//! name by name.
//!
//! Tensors are stored at float32 precision. The training loop rounds its
//! parameters to the float32 grid before computing the metrics it records,
//! so reloading a checkpoint and re-evaluating reproduces those recorded
//! metrics exactly.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NMCRLCK1";

/// Dataset geometry a checkpoint was trained against; enough to rebuild the
/// encoder without the original config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryMeta {
    pub channels: usize,
    pub window_length: usize,
    pub sampling_rate_hz: f64,
    pub n_subjects: usize,
    pub embed_dim: usize,
}

/// One epoch's training record. `top1`/`top5` are full-way zero-shot
/// accuracies on the unseen split, computed with the float32-rounded
/// parameters that the checkpoint stores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub epoch: usize,
    pub seed: u64,
    /// Fully resolved training config (defaults materialized).
    pub config: serde_json::Value,
    pub geometry: GeometryMeta,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileMeta {
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// Write a checkpoint. Tensor values are rounded to float32.
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in tensor.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let file_meta = FileMeta { meta: meta.clone(), tensors: entries };
    let json = serde_json::to_vec_pretty(&file_meta)
        .map_err(|e| Error::json(path, format!("metadata serialization failed: {e}")))?;
    let mut out: Vec<u8> = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a checkpoint back: metadata plus named tensors in stored order.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::data(format!("{} is not a checkpoint archive", path.display())));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16 + json_len;
    if bytes.len() < payload_start {
        return Err(Error::data(format!("{} is truncated inside its metadata", path.display())));
    }
    let file_meta: FileMeta = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::json(path, e.to_string()))?;
    if file_meta.meta.version != 1 {
        return Err(Error::data(format!(
            "unsupported checkpoint version {}",
            file_meta.meta.version
        )));
    }
    let payload = &bytes[payload_start..];
    let mut tensors = Vec::with_capacity(file_meta.tensors.len());
    for entry in &file_meta.tensors {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * numel;
        if end > payload.len() {
            return Err(Error::data(format!(
                "tensor {} needs payload bytes {}..{} but the archive holds {}",
                entry.name,
                entry.offset,
                end,
                payload.len()
            )));
        }
        let data: Vec<f64> = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(&entry.shape, data)));
    }
    Ok((file_meta.meta, tensors))
}

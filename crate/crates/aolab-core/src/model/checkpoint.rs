//! Checkpoint container: a JSON header (model config, caller metadata,
//! tensor manifest) followed by raw little-endian f32 tensor data.
//!
//! Layout:
//! ```text
//! magic   b"AOLABCK1"
//! u32 LE  header byte length
//! bytes   header JSON { config, meta, tensors: [{name, shape, offset}] }
//! bytes   f32 LE tensor payloads at the stated offsets
//! ```
//! Writes go through a temp file and an atomic rename so a crashed run
//! never leaves a half-written checkpoint behind.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::model::params::Parameters;
use crate::model::ModelConfig;
use crate::Result;

const CKPT_MAGIC: &[u8; 8] = b"AOLABCK1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload region.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Serializes `params` with its config and free-form metadata.
pub fn save_checkpoint(
    path: &Path,
    params: &Parameters<f32>,
    cfg: &ModelConfig,
    meta: &serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in params.tensors() {
        entries.push(TensorEntry {
            name,
            shape: t.shape.clone(),
            offset: payload.len() as u64,
        });
        for &x in &t.data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = Header {
        config: cfg.clone(),
        meta: meta.clone(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CoreError::format(format!("checkpoint header: {e}")))?;

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&(header_json.len() as u32).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint, validating the manifest against the config's
/// expected tensor set and shapes.
pub fn load_checkpoint(path: &Path) -> Result<(Parameters<f32>, ModelConfig, serde_json::Value)> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| CoreError::format("checkpoint truncated".to_string()))?;
    if &magic != CKPT_MAGIC {
        return Err(CoreError::format("bad checkpoint magic".to_string()));
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes)
        .map_err(|_| CoreError::format("checkpoint truncated".to_string()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)
        .map_err(|_| CoreError::format("checkpoint header truncated".to_string()))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| CoreError::format(format!("checkpoint header parse: {e}")))?;
    header.config.validate()?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let mut params: Parameters<f32> = Parameters::zeros(&header.config);
    let mut filled = 0usize;
    let expected = params.tensors().len();
    for (name, t) in params.tensors_mut() {
        let entry = header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CoreError::format(format!("checkpoint missing tensor {name}")))?;
        if entry.shape != t.shape {
            return Err(CoreError::format(format!(
                "tensor {name}: shape {:?} in file, {:?} expected",
                entry.shape, t.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + t.numel() * 4;
        if end > payload.len() {
            return Err(CoreError::format(format!("tensor {name} payload truncated")));
        }
        for (x, b) in t.data.iter_mut().zip(payload[start..end].chunks_exact(4)) {
            *x = f32::from_le_bytes(b.try_into().unwrap());
        }
        filled += 1;
    }
    if header.tensors.len() != expected {
        return Err(CoreError::format(format!(
            "checkpoint has {} tensors, model expects {}",
            header.tensors.len(),
            filled
        )));
    }
    Ok((params, header.config, header.meta))
}

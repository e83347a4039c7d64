//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic `NRCKPT\0\0`, little-endian `u32` format version,
//! little-endian `u64` header length, a JSON header (phase tag, model spec,
//! optimizer settings, epoch counter, caller payload), then the parameter
//! vector and the optimizer velocity as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, ModelState, Sgd, SgdConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NRCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `pretrain`, `warmup` or `iter{k}`.
    pub phase: String,
    pub model: ModelState,
    /// Opaque state stored next to the model (refinement bookkeeping).
    pub payload: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    phase: String,
    epoch: usize,
    spec: ModelSpec,
    sgd: SgdConfig,
    param_count: usize,
    payload: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let model = &ckpt.model;
    let header = Header {
        phase: ckpt.phase.clone(),
        epoch: model.epoch,
        spec: model.spec.clone(),
        sgd: model.optimizer.config.clone(),
        param_count: model.params.len(),
        payload: ckpt.payload.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Version(e.to_string()))?;
    let mut buf = Vec::with_capacity(20 + header.len() + 16 * model.params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in model.params.iter().chain(&model.optimizer.velocity) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Version(format!("{}: {why}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(&e.to_string()))?;
    let body = &bytes[header_end..];
    if body.len() != 16 * header.param_count {
        return Err(bad("parameter section has the wrong length"));
    }
    let floats: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let (params, velocity) = floats.split_at(header.param_count);
    let sgd = Sgd {
        config: header.sgd,
        velocity: velocity.to_vec(),
    };
    let model = ModelState::from_parts(header.spec, params.to_vec(), sgd, header.epoch)?;
    Ok(Checkpoint {
        phase: header.phase,
        model,
        payload: header.payload,
    })
}

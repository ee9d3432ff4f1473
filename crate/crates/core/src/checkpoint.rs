//! Model checkpoints.
//!
//! A checkpoint is a single file: one line of JSON metadata terminated by
//! `\n`, followed by every parameter as a little-endian `f64` in canonical
//! block order. The metadata carries a SHA-256 of the payload so truncated or
//! edited files are caught on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregator::PoolingKind;
use crate::error::{Error, Result};
use crate::model::{CascadeModel, ClipMode, ModelDims};

const FORMAT: &str = "exitcascade-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub dims: ModelDims,
    pub timesteps: usize,
    pub pooling: PoolingKind,
    pub clip_mode: ClipMode,
    /// 1 after classifier training, 2 after gate training, 0 for joint.
    pub stage: u8,
    /// Trade-off parameter the gates were trained with, if any.
    #[serde(default)]
    pub beta: Option<f64>,
    pub n_params: usize,
    pub payload_sha256: String,
}

pub fn to_bytes(model: &CascadeModel, stage: u8, beta: Option<f64>) -> Vec<u8> {
    let params = model.to_flat();
    let mut payload = Vec::with_capacity(params.len() * 8);
    for p in &params {
        payload.extend_from_slice(&p.to_le_bytes());
    }
    let meta = CheckpointMeta {
        format: FORMAT.into(),
        dims: model.dims(),
        timesteps: model.timesteps(),
        pooling: model.pooling,
        clip_mode: model.clip_mode,
        stage,
        beta,
        n_params: params.len(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let mut out = serde_json::to_vec(&meta).expect("metadata serializes");
    out.push(b'\n');
    out.extend_from_slice(&payload);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(CascadeModel, CheckpointMeta)> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing metadata line".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    if meta.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{}`", meta.format)));
    }
    let payload = &bytes[split + 1..];
    if payload.len() != meta.n_params * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, metadata promises {} parameters",
            payload.len(),
            meta.n_params
        )));
    }
    if hex::encode(Sha256::digest(payload)) != meta.payload_sha256 {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }
    let mut model = CascadeModel::new(meta.dims, meta.timesteps, meta.pooling, meta.clip_mode, 0)?;
    if model.param_count() != meta.n_params {
        return Err(Error::Checkpoint(format!(
            "shape implies {} parameters, metadata says {}",
            model.param_count(),
            meta.n_params
        )));
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    model.load_flat(&params)?;
    model.check_finite()?;
    Ok((model, meta))
}

pub fn save(path: &Path, model: &CascadeModel, stage: u8, beta: Option<f64>) -> Result<()> {
    fs::write(path, to_bytes(model, stage, beta))
        .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<(CascadeModel, CheckpointMeta)> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    from_bytes(&bytes)
}

//! Checkpoint file format.
//!
//! One file per checkpoint:
//!
//! ```text
//! magic  b"SQCK"
//! u32    format version (little-endian), currently 1
//! u64    header length in bytes (little-endian)
//! [u8]   header: JSON {config, step, val_perplexity, val_rouge, params: [{name, shape}]}
//! [u8]   parameter data: f64 little-endian, concatenated in header order
//! ```
//!
//! Parameter bytes are written bit-exactly, so save → load round-trips are
//! exact. A checkpoint's identity is the SHA-256 of the whole file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::MetricTriple;

use super::params::{ParamLayout, Parameters};
use super::{Model, ModelConfig};

const MAGIC: &[u8; 4] = b"SQCK";
const VERSION: u32 = 1;

/// The frozen state of a training run: configuration, parameters θ, and the
/// validation metrics current when it was written.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Parameters,
    pub step: u64,
    pub val_perplexity: f64,
    pub val_rouge: Option<MetricTriple>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model, step: u64, val_perplexity: f64, val_rouge: Option<MetricTriple>) -> Self {
        ModelCheckpoint {
            config: model.config.clone(),
            params: model.params.clone(),
            step,
            val_perplexity,
            val_rouge,
        }
    }

    pub fn to_model(&self) -> Model {
        Model::from_checkpoint(self)
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderParam {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    val_perplexity: f64,
    val_rouge: Option<MetricTriple>,
    params: Vec<HeaderParam>,
}

/// Serialize a checkpoint to bytes (the format documented above).
pub fn checkpoint_bytes(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let header = Header {
        config: ckpt.config.clone(),
        step: ckpt.step,
        val_perplexity: ckpt.val_perplexity,
        val_rouge: ckpt.val_rouge,
        params: ckpt
            .params
            .layout()
            .entries()
            .iter()
            .map(|e| HeaderParam {
                name: e.name.clone(),
                shape: e.shape.clone(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + ckpt.params.values.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for v in &ckpt.params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn checkpoint_id_of_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write a checkpoint; returns its content id (SHA-256 of the file bytes).
pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<String> {
    let bytes = checkpoint_bytes(ckpt)?;
    fs::write(path, &bytes)?;
    Ok(checkpoint_id_of_bytes(&bytes))
}

/// Read a checkpoint back; returns it with its content id.
pub fn load_checkpoint(path: &Path) -> Result<(ModelCheckpoint, String)> {
    let bytes = fs::read(path)?;
    let malformed = |reason: &str| Error::MalformedFile {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(malformed("missing SQCK magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(malformed(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(malformed("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    header.config.validate()?;

    let layout = ParamLayout::for_config(&header.config);
    // the stored layout must be exactly what the config implies
    if layout.entries().len() != header.params.len()
        || layout
            .entries()
            .iter()
            .zip(&header.params)
            .any(|(e, h)| e.name != h.name || e.shape != h.shape)
    {
        return Err(malformed("parameter list does not match architecture"));
    }

    let data = &bytes[16 + header_len..];
    if data.len() != layout.total_len() * 8 {
        return Err(malformed(&format!(
            "expected {} parameter bytes, found {}",
            layout.total_len() * 8,
            data.len()
        )));
    }
    let mut values = Vec::with_capacity(layout.total_len());
    for chunk in data.chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let ckpt = ModelCheckpoint {
        config: header.config,
        params: Parameters::from_flat(layout, values),
        step: header.step,
        val_perplexity: header.val_perplexity,
        val_rouge: header.val_rouge,
    };
    let id = checkpoint_id_of_bytes(&bytes);
    Ok((ckpt, id))
}

//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `STRKSYN\0`, a little-endian `u32` header length,
//! a JSON header (format version, model config, training metadata and the
//! tensor table), then every tensor's values as little-endian `f64` in table
//! order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use strokesyn_core::synthesis::ModelRegistry;
use strokesyn_core::vae::{Model, ModelConfig, ModelError, Params, Tensor};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"STRKSYN\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {error}")]
    Io { path: String, error: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {0} is not supported (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint is truncated or has trailing bytes: {0}")]
    Length(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint {path} carries no w_kl; give one explicitly")]
    MissingWeight { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    pub data_scale: f64,
    /// KL weight the model was trained with, if known.
    pub w_kl: Option<f64>,
    pub step: usize,
    pub tensors: Vec<TensorInfo>,
}

/// Training metadata stored next to the weights.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CheckpointMeta {
    pub w_kl: Option<f64>,
    pub step: usize,
}

pub fn to_bytes(model: &Model, meta: CheckpointMeta) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        data_scale: model.data_scale,
        w_kl: meta.w_kl,
        step: meta.step,
        tensors: model.params.tensors.iter().map(|t| TensorInfo { name: t.name.clone(), rows: t.rows, cols: t.cols }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 8 * model.params.count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &model.params.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Header), CheckpointError> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| CheckpointError::Length("header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(header.format_version));
    }
    let mut data = &bytes[12 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let n = info.rows * info.cols;
        if data.len() < 8 * n {
            return Err(CheckpointError::Length(format!("tensor {} needs {n} values", info.name)));
        }
        let values = data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        data = &data[8 * n..];
        tensors.push(Tensor { name: info.name.clone(), rows: info.rows, cols: info.cols, data: values });
    }
    if !data.is_empty() {
        return Err(CheckpointError::Length(format!("{} trailing bytes", data.len())));
    }
    if !(header.data_scale.is_finite() && header.data_scale > 0.0) {
        return Err(CheckpointError::Header("data_scale must be positive".into()));
    }
    let mut model = Model::from_params(header.config.clone(), Params { tensors })?;
    model.data_scale = header.data_scale;
    Ok((model, header))
}

pub fn save(path: &Path, model: &Model, meta: CheckpointMeta) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(model, meta)).map_err(|error| CheckpointError::Io { path: path.display().to_string(), error })
}

pub fn load(path: &Path) -> Result<(Model, Header), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|error| CheckpointError::Io { path: path.display().to_string(), error })?;
    from_bytes(&bytes)
}

/// One registry entry as written in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryEntry {
    pub path: PathBuf,
    /// Overrides the weight recorded in the checkpoint.
    #[serde(default)]
    pub w_kl: Option<f64>,
}

pub fn load_registry(entries: &[RegistryEntry]) -> Result<ModelRegistry, CheckpointError> {
    let mut reg = ModelRegistry::new();
    for e in entries {
        let (model, header) = load(&e.path)?;
        let w = e.w_kl.or(header.w_kl).ok_or_else(|| CheckpointError::MissingWeight { path: e.path.display().to_string() })?;
        reg.insert(w, model);
    }
    Ok(reg)
}

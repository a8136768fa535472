//! Sequence-to-sequence variational autoencoder over stroke-5 rows.
//!
//! A bidirectional LSTM encodes a segment into a diagonal Gaussian over the
//! latent code; an autoregressive decoder conditioned on the code emits, per
//! step, a bivariate-normal mixture over the next offset and pen logits.

mod cell;
pub mod gmm;
pub(crate) mod model;
pub mod params;
pub(crate) mod tape;

use alloc::string::String;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gmm::{apply_temperature, sample_point, GmmParams};
pub use model::{sample_latent, DecoderState, LatentCode, LatentDistribution, Model};
pub use params::{Grads, ParamId, Params, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("sequence of {0} rows exceeds the 300-row limit")]
    SequenceTooLong(usize),
    #[error("sequence has no rows")]
    EmptySequence,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("parameter {name} has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, expected: (usize, usize), got: (usize, usize) },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("invalid mixture: {0}")]
    InvalidMixture(&'static str),
    #[error("temperature {0} outside [0, 1]")]
    OutOfRangeTau(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// Layer-normalized LSTM.
    #[default]
    PlainRecurrent,
    /// LSTM whose gate weights are rescaled per step by a small auxiliary LSTM.
    HypernetworkRecurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_units: usize,
    pub dec_units: usize,
    pub latent_dim: usize,
    pub mixtures: usize,
    pub dec_cell: CellKind,
    pub layer_norm: bool,
    /// Probability of keeping a candidate-cell unit during training. The
    /// opposite reading of a "90%" dropout setting is `0.1`.
    pub recurrent_dropout_keep: f64,
    pub max_decode_len: usize,
    pub hyper_units: usize,
    pub hyper_embedding: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_units: 512,
            dec_units: 2048,
            latent_dim: 128,
            mixtures: 20,
            dec_cell: CellKind::PlainRecurrent,
            layer_norm: true,
            recurrent_dropout_keep: 0.9,
            max_decode_len: 250,
            hyper_units: 256,
            hyper_embedding: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [self.enc_units, self.dec_units, self.latent_dim, self.mixtures];
        if dims.iter().any(|&d| d == 0) {
            return Err(ModelError::InvalidConfig("all dimensions must be at least 1"));
        }
        if self.dec_cell == CellKind::HypernetworkRecurrent && (self.hyper_units == 0 || self.hyper_embedding == 0) {
            return Err(ModelError::InvalidConfig("hypernetwork dimensions must be at least 1"));
        }
        if !(self.recurrent_dropout_keep > 0.0 && self.recurrent_dropout_keep <= 1.0) {
            return Err(ModelError::InvalidConfig("recurrent_dropout_keep must be in (0, 1]"));
        }
        if self.max_decode_len == 0 || self.max_decode_len > crate::segmentation::MAX_MODEL_LEN {
            return Err(ModelError::InvalidConfig("max_decode_len must be in 1..=300"));
        }
        Ok(())
    }
}

//! Segment, encode, re-decode and reassemble.
//!
//! The KL weight is a training-time setting, so choosing one at synthesis
//! time means choosing which trained model to use: [`ModelRegistry`] maps
//! each trained `w_kl` to its model.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ink::{denormalize, from_stroke5, normalize, normalize_or_identity, to_stroke5, InkError, InkSequence, ScaleMode};
use crate::segmentation::{reassemble, segment, PlacementMode, Segment, SegmentError, SegmentationMode, SegmentationPolicy, MAX_MODEL_LEN};
use crate::vae::{sample_latent, LatentCode, LatentDistribution, Model, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error(transparent)]
    Ink(#[from] InkError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sequence of {0} samples exceeds the 300-sample limit for unsegmented synthesis")]
    SequenceTooLong(usize),
    #[error("no model trained with w_kl = {0}")]
    UnknownModel(f64),
    #[error("override for segment {index} but the input has {segments} segments")]
    OverrideOutOfRange { index: usize, segments: usize },
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(&'static str),
}

/// Trained models keyed by the KL weight they were trained with.
#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    entries: Vec<(f64, Model)>,
}

impl ModelRegistry {
    /// Keys closer than this are treated as the same weight.
    pub const KEY_TOL: f64 = 1e-9;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(w_kl: f64, model: Model) -> Self {
        let mut r = Self::new();
        r.insert(w_kl, model);
        r
    }

    /// Adds or replaces the model for `w_kl`.
    pub fn insert(&mut self, w_kl: f64, model: Model) {
        match self.entries.iter_mut().find(|(w, _)| (w - w_kl).abs() <= Self::KEY_TOL) {
            Some(slot) => slot.1 = model,
            None => {
                self.entries.push((w_kl, model));
                self.entries.sort_by(|a, b| a.0.total_cmp(&b.0));
            }
        }
    }

    pub fn get(&self, w_kl: f64) -> Option<&Model> {
        self.entries.iter().find(|(w, _)| (w - w_kl).abs() <= Self::KEY_TOL).map(|(_, m)| m)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|(w, _)| *w).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &Model)> {
        self.entries.iter().map(|(w, m)| (*w, m))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentOverride {
    pub segment: usize,
    pub tau: f64,
}

/// Where the offset scale for each segment comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// The corpus scale the model was trained with.
    #[default]
    Corpus,
    /// The segment's own offset standard deviation (scale 1 if degenerate).
    PerSegment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Decoding temperature in `[0, 1]`; 0 decodes greedily.
    pub tau: f64,
    /// Which registry model to use.
    pub w_kl_model: f64,
    pub n_samples: usize,
    pub policy: SegmentationPolicy,
    pub placement_mode: PlacementMode,
    pub per_segment_overrides: Vec<SegmentOverride>,
    pub seed: u64,
    /// Draw `z` from the encoder Gaussian even when a segment's temperature
    /// is 0. Off by default, which makes `tau = 0` fully deterministic.
    pub stochastic_latent: bool,
    pub normalization: Normalization,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            tau: 0.5,
            w_kl_model: 0.25,
            n_samples: 1,
            policy: SegmentationPolicy::default(),
            placement_mode: PlacementMode::Absolute,
            per_segment_overrides: Vec::new(),
            seed: 0,
            stochastic_latent: false,
            normalization: Normalization::Corpus,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        let in_range = |t: f64| (0.0..=1.0).contains(&t);
        if !in_range(self.tau) {
            return Err(ModelError::OutOfRangeTau(self.tau).into());
        }
        if let Some(o) = self.per_segment_overrides.iter().find(|o| !in_range(o.tau)) {
            return Err(ModelError::OutOfRangeTau(o.tau).into());
        }
        if self.n_samples == 0 {
            return Err(SynthesisError::InvalidConfig("n_samples must be at least 1"));
        }
        if self.policy.mode == SegmentationMode::Velocity {
            self.policy.validate()?;
        }
        Ok(())
    }

    /// Temperature used for segment `k`; the last override for `k` wins.
    pub fn tau_for(&self, k: usize) -> f64 {
        self.per_segment_overrides.iter().rev().find(|o| o.segment == k).map_or(self.tau, |o| o.tau)
    }
}

/// Deterministic work counters; wall-clock time is left to the caller so
/// reports stay reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SynthesisTiming {
    pub segments: usize,
    pub decode_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub input_id: String,
    pub config: SynthesisConfig,
    pub segments: Vec<Segment>,
    /// `latents[j][k]`: code used for segment `k` of output `j`.
    pub latents: Vec<Vec<LatentCode>>,
    pub outputs: Vec<InkSequence>,
    pub timing: SynthesisTiming,
}

/// Mixes a base seed with stream coordinates (SplitMix64 finalizer).
pub fn derive_seed(base: u64, coords: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    coords.iter().fold(mix(base), |acc, &c| mix(acc.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(mix(c))))
}

/// The `id` metadata entry, else the position in the dataset.
pub fn item_id(ink: &InkSequence, index: usize) -> String {
    ink.metadata.get("id").cloned().unwrap_or_else(|| format!("{index}"))
}

struct Prepared {
    segments: Vec<Segment>,
    encoded: Vec<(crate::ink::Stroke5Sequence, crate::ink::NormalizationRecord, LatentDistribution)>,
}

fn prepare(ink: &InkSequence, model: &Model, cfg: &SynthesisConfig) -> Result<Prepared, SynthesisError> {
    ink.validate()?;
    if cfg.policy.mode == SegmentationMode::None && ink.len() > MAX_MODEL_LEN {
        return Err(SynthesisError::SequenceTooLong(ink.len()));
    }
    let segments = segment(ink, &cfg.policy)?;
    if let Some(o) = cfg.per_segment_overrides.iter().find(|o| o.segment >= segments.len()) {
        return Err(SynthesisError::OverrideOutOfRange { index: o.segment, segments: segments.len() });
    }
    let mut encoded = Vec::with_capacity(segments.len());
    for seg in &segments {
        let s5 = to_stroke5(&seg.extract(ink))?;
        let (norm, record) = match cfg.normalization {
            Normalization::Corpus => normalize(&s5, ScaleMode::Fixed(model.data_scale))?,
            Normalization::PerSegment => {
                let (n, r, _) = normalize_or_identity(&s5, ScaleMode::PerSequence);
                (n, r)
            }
        };
        let dist = model.encode(&norm)?;
        encoded.push((norm, record, dist));
    }
    Ok(Prepared { segments, encoded })
}

fn run_item(
    ink: &InkSequence,
    index: usize,
    registry: &ModelRegistry,
    cfg: &SynthesisConfig,
) -> Result<SynthesisReport, SynthesisError> {
    cfg.validate()?;
    let model = registry.get(cfg.w_kl_model).ok_or(SynthesisError::UnknownModel(cfg.w_kl_model))?;
    let prep = prepare(ink, model, cfg)?;
    let nz = model.config.latent_dim;
    let max_len = model.config.max_decode_len;
    let mut timing = SynthesisTiming { segments: prep.segments.len(), decode_steps: 0 };
    let mut outputs = Vec::with_capacity(cfg.n_samples);
    let mut latents = Vec::with_capacity(cfg.n_samples);
    for j in 0..cfg.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[index as u64, j as u64]));
        let mut pieces = Vec::with_capacity(prep.segments.len());
        let mut codes = Vec::with_capacity(prep.segments.len());
        for (k, (norm, record, dist)) in prep.encoded.iter().enumerate() {
            let tau = cfg.tau_for(k);
            // always drawn so that the stream layout does not depend on tau
            let noise: Vec<f64> = (0..nz).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z = if tau == 0.0 && !cfg.stochastic_latent {
                sample_latent(dist, None)
            } else {
                sample_latent(dist, Some(&noise))
            };
            let mut gen = model.generate(&z, tau, max_len, Some(&mut rng))?;
            timing.decode_steps += gen.len();
            gen.scale = norm.scale;
            gen.start_pen_down = norm.start_pen_down;
            gen.end_pen_down = norm.end_pen_down;
            pieces.push(from_stroke5(&denormalize(&gen, record))?);
            codes.push(z);
        }
        let mut out = reassemble(&prep.segments, &pieces, cfg.placement_mode)?;
        out.label = ink.label.clone();
        out.metadata = ink.metadata.clone();
        out.metadata.insert("synthetic".to_string(), format!("{j}"));
        outputs.push(out);
        latents.push(codes);
    }
    Ok(SynthesisReport {
        input_id: item_id(ink, index),
        config: cfg.clone(),
        segments: prep.segments,
        latents,
        outputs,
        timing,
    })
}

/// `cfg.n_samples` synthetic renditions of `ink`.
pub fn synthesize(ink: &InkSequence, registry: &ModelRegistry, cfg: &SynthesisConfig) -> Result<Vec<InkSequence>, SynthesisError> {
    run_item(ink, 0, registry, cfg).map(|r| r.outputs)
}

/// Like [`synthesize`] for a whole dataset. Item `i` draws from its own
/// random stream, so results do not depend on which other items are present
/// before it; a failing item does not stop the batch.
pub fn batch_synthesize(
    dataset: &[InkSequence],
    registry: &ModelRegistry,
    cfg: &SynthesisConfig,
) -> Vec<Result<SynthesisReport, SynthesisError>> {
    dataset.iter().enumerate().map(|(i, ink)| run_item(ink, i, registry, cfg)).collect()
}

/// Synthesizes item `index` of a dataset without running the others.
pub fn synthesize_item(
    ink: &InkSequence,
    index: usize,
    registry: &ModelRegistry,
    cfg: &SynthesisConfig,
) -> Result<SynthesisReport, SynthesisError> {
    run_item(ink, index, registry, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub id: String,
    pub label: String,
    pub z: Vec<f64>,
}

/// Encoder mean of each whole input, for embedding plots.
pub fn export_latents(
    dataset: &[InkSequence],
    registry: &ModelRegistry,
    cfg: &SynthesisConfig,
) -> Result<Vec<Result<LatentRow, SynthesisError>>, SynthesisError> {
    let model = registry.get(cfg.w_kl_model).ok_or(SynthesisError::UnknownModel(cfg.w_kl_model))?;
    let whole = SynthesisConfig { policy: SegmentationPolicy::whole(), per_segment_overrides: Vec::new(), ..cfg.clone() };
    Ok(dataset
        .iter()
        .enumerate()
        .map(|(i, ink)| {
            let prep = prepare(ink, model, &whole)?;
            let dist = &prep.encoded[0].2;
            Ok(LatentRow { id: item_id(ink, i), label: ink.label.clone(), z: dist.mu.clone() })
        })
        .collect())
}

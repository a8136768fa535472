//! Loss terms and the seeded optimization loop.
//!
//! The objective is `L_R + w_kl * L_KL`: the reconstruction term is the
//! mixture negative log-likelihood of each target offset plus the pen
//! cross-entropy, averaged over rows; the KL term is the closed-form
//! divergence of the encoder Gaussian from a standard normal, averaged over
//! latent dimensions.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ink::{PenState, Stroke5Row, Stroke5Sequence};
use crate::num;
use crate::segmentation::MAX_MODEL_LEN;
use crate::vae::model::Dropout;
use crate::vae::tape::{kl_value, Tape};
use crate::vae::{GmmParams, Grads, LatentDistribution, Model, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("parameter sequence has {params} steps but the target has {rows} rows")]
    LengthMismatch { params: usize, rows: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("training sequence {index} has {len} rows (limit 300)")]
    SequenceTooLong { index: usize, len: usize },
    #[error("non-finite loss at step {step} (examples {examples:?})")]
    NonFiniteLoss { step: usize, examples: Vec<usize> },
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
}

/// Mean per-row mixture NLL plus pen cross-entropy.
pub fn reconstruction_loss(param_seq: &[GmmParams], target: &Stroke5Sequence) -> Result<f64, TrainError> {
    if param_seq.len() != target.rows.len() {
        return Err(TrainError::LengthMismatch { params: param_seq.len(), rows: target.rows.len() });
    }
    reconstruction_loss_masked(param_seq, target, target.rows.len())
}

/// Reconstruction loss over a padded target: only the first `valid` rows
/// count and the average is taken over them.
pub fn reconstruction_loss_masked(
    param_seq: &[GmmParams],
    target: &Stroke5Sequence,
    valid: usize,
) -> Result<f64, TrainError> {
    if param_seq.len() != target.rows.len() || valid > target.rows.len() || valid == 0 {
        return Err(TrainError::LengthMismatch { params: param_seq.len(), rows: target.rows.len() });
    }
    let sum: f64 = param_seq.iter().zip(&target.rows).take(valid).map(|(g, r)| g.step_nll(r)).sum();
    Ok(sum / valid as f64)
}

/// Pads every sequence to the longest one by repeating its terminal row.
/// Returns the padded sequences with their true lengths.
pub fn pad_batch(batch: &[Stroke5Sequence]) -> Vec<(Stroke5Sequence, usize)> {
    let max = batch.iter().map(Stroke5Sequence::len).max().unwrap_or(0);
    batch
        .iter()
        .map(|s| {
            let mut p = s.clone();
            let last = *s.rows.last().unwrap_or(&Stroke5Row::new(0.0, 0.0, PenState::End));
            p.rows.resize(max, last);
            (p, s.len())
        })
        .collect()
}

/// `-(1 / 2N) * sum(1 + sigma_hat - mu^2 - exp(sigma_hat))`.
pub fn kl_loss(dist: &LatentDistribution) -> f64 {
    kl_value(&dist.mu, &dist.sigma_hat)
}

pub fn total_loss(l_r: f64, l_kl: f64, w_kl: f64) -> f64 {
    l_r + w_kl * l_kl
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_r: f64,
    pub l_kl: f64,
    pub total: f64,
}

/// Teacher-forced loss of one sequence without dropout; `noise` is the
/// standard-normal draw for the latent (`None` uses the mean).
pub fn example_loss(
    model: &Model,
    target: &Stroke5Sequence,
    noise: Option<&[f64]>,
    w_kl: f64,
) -> Result<LossParts, TrainError> {
    let mut t = Tape::new(&model.params);
    let graph = model.record_loss(&mut t, target, noise, None)?;
    Ok(parts(&t, &graph.steps, graph.kl, w_kl))
}

/// [`example_loss`] together with its gradient with respect to every parameter.
pub fn example_gradient(
    model: &Model,
    target: &Stroke5Sequence,
    noise: Option<&[f64]>,
    w_kl: f64,
) -> Result<(LossParts, Grads), TrainError> {
    let mut grads = model.params.zeros_like();
    let p = accumulate(model, target, noise, None, w_kl, 1.0, &mut grads)?;
    Ok((p, grads))
}

fn parts(t: &Tape<'_>, steps: &[crate::vae::tape::Node], kl: crate::vae::tape::Node, w_kl: f64) -> LossParts {
    let l_r = steps.iter().map(|&n| t.scalar(n)).sum::<f64>() / steps.len() as f64;
    let l_kl = t.scalar(kl);
    LossParts { l_r, l_kl, total: total_loss(l_r, l_kl, w_kl) }
}

/// Adds `weight * d total / d params` for one example into `grads`.
fn accumulate(
    model: &Model,
    target: &Stroke5Sequence,
    noise: Option<&[f64]>,
    dropout: Option<Dropout<'_>>,
    w_kl: f64,
    weight: f64,
    grads: &mut Grads,
) -> Result<LossParts, TrainError> {
    let mut t = Tape::new(&model.params);
    let graph = model.record_loss(&mut t, target, noise, dropout)?;
    let p = parts(&t, &graph.steps, graph.kl, w_kl);
    if p.total.is_finite() {
        let per_row = weight / graph.steps.len() as f64;
        let mut seeds: Vec<_> = graph.steps.iter().map(|&n| (n, per_row)).collect();
        if w_kl != 0.0 {
            seeds.push((graph.kl, weight * w_kl));
        }
        t.backward(&seeds, grads);
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub w_kl: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Global-norm clipping threshold; 0 disables clipping.
    pub grad_clip: f64,
    /// Ramp the KL weight linearly from 0 over `kl_warmup_steps`.
    pub kl_anneal: bool,
    pub kl_warmup_steps: usize,
    pub seed: u64,
    /// Emit a checkpoint every this many steps; 0 only at the end.
    pub checkpoint_every: usize,
    /// Train with recurrent dropout (and the model's keep probability).
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            w_kl: 0.25,
            learning_rate: 1e-4,
            batch_size: 64,
            steps: 20_000,
            grad_clip: 1.0,
            kl_anneal: false,
            kl_warmup_steps: 1_000,
            seed: 0,
            checkpoint_every: 0,
            dropout: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1"));
        }
        if !(self.w_kl >= 0.0) {
            return Err(TrainError::InvalidConfig("w_kl must be non-negative"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(TrainError::InvalidConfig("grad_clip must be non-negative"));
        }
        Ok(())
    }

    /// KL weight in effect at `step` (1-based).
    pub fn kl_weight_at(&self, step: usize) -> f64 {
        if self.kl_anneal && self.kl_warmup_steps > 0 {
            self.w_kl * (step as f64 / self.kl_warmup_steps as f64).min(1.0)
        } else {
            self.w_kl
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_r: f64,
    pub l_kl: f64,
    pub total: f64,
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Grads,
    pub v: Grads,
    pub t: u64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(model: &Model) -> Self {
        Adam { m: model.params.zeros_like(), v: model.params.zeros_like(), t: 0 }
    }

    pub fn update(&mut self, model: &mut Model, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(Self::B1, self.t as f64);
        let c2 = 1.0 - libm::pow(Self::B2, self.t as f64);
        for (k, tensor) in model.params.tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m.data[k], &mut self.v.data[k], &grads.data[k]);
            for i in 0..tensor.data.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                tensor.data[i] -= lr * mh / (num::sqrt(vh) + Self::EPS);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub step: usize,
    pub history: Vec<LossRecord>,
}

/// Single-writer training loop over a fixed, already-normalized corpus.
pub struct Trainer<'d> {
    pub state: TrainState,
    cfg: TrainConfig,
    data: &'d [Stroke5Sequence],
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    grads: Grads,
}

impl<'d> Trainer<'d> {
    pub fn new(model: Model, cfg: TrainConfig, data: &'d [Stroke5Sequence]) -> Result<Self, TrainError> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        for (index, s) in data.iter().enumerate() {
            if s.len() > MAX_MODEL_LEN {
                return Err(TrainError::SequenceTooLong { index, len: s.len() });
            }
            s.validate().map_err(|_| TrainError::InvalidConfig("training sequence is not well-formed stroke-5"))?;
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let grads = model.params.zeros_like();
        let optimizer = Adam::new(&model);
        Ok(Trainer {
            state: TrainState { model, optimizer, step: 0, history: Vec::new() },
            cfg,
            data,
            rng,
            order: Vec::new(),
            cursor: 0,
            grads,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn next_index(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.data.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn step(&mut self) -> Result<LossRecord, TrainError> {
        let step = self.state.step + 1;
        let w_kl = self.cfg.kl_weight_at(step);
        let b = self.cfg.batch_size;
        let batch: Vec<(usize, u64)> = (0..b).map(|_| (self.next_index(), self.rng.random())).collect();
        self.grads.zero();
        let keep = self.state.model.config.recurrent_dropout_keep;
        let nz = self.state.model.config.latent_dim;
        let (mut l_r, mut l_kl) = (0.0, 0.0);
        let mut bad = Vec::new();
        for &(index, seed) in &batch {
            let mut ex_rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<f64> = (0..nz).map(|_| StandardNormal.sample(&mut ex_rng)).collect();
            let dropout = (self.cfg.dropout && keep < 1.0).then_some(Dropout { keep, rng: &mut ex_rng });
            let p = accumulate(
                &self.state.model,
                &self.data[index],
                Some(&noise),
                dropout,
                w_kl,
                1.0 / b as f64,
                &mut self.grads,
            )?;
            if !p.total.is_finite() {
                bad.push(index);
            }
            l_r += p.l_r;
            l_kl += p.l_kl;
        }
        if !bad.is_empty() || !self.grads.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, examples: bad });
        }
        let clip = self.cfg.grad_clip;
        if clip > 0.0 {
            let norm = self.grads.norm();
            if norm > clip {
                self.grads.scale(clip / norm);
            }
        }
        self.state.optimizer.update(&mut self.state.model, &self.grads, self.cfg.learning_rate);
        let (l_r, l_kl) = (l_r / b as f64, l_kl / b as f64);
        let rec = LossRecord { step, l_r, l_kl, total: total_loss(l_r, l_kl, w_kl) };
        self.state.step = step;
        self.state.history.push(rec);
        Ok(rec)
    }

    /// Runs the remaining configured steps, calling `on_checkpoint` every
    /// `checkpoint_every` steps and once at the end.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(&TrainState)) -> Result<(), TrainError> {
        while self.state.step < self.cfg.steps {
            self.step()?;
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.state.step % every == 0 && self.state.step < self.cfg.steps {
                on_checkpoint(&self.state);
            }
        }
        on_checkpoint(&self.state);
        Ok(())
    }
}

/// Trains a fresh model on `dataset`. Sequences must already be normalized;
/// `data_scale` is stored on the model for synthesis.
pub fn train(
    dataset: &[Stroke5Sequence],
    model_cfg: crate::vae::ModelConfig,
    train_cfg: TrainConfig,
    data_scale: f64,
    on_checkpoint: impl FnMut(&TrainState),
) -> Result<TrainState, TrainError> {
    let mut model = Model::new(model_cfg, train_cfg.seed)?;
    model.data_scale = data_scale;
    let mut trainer = Trainer::new(model, train_cfg, dataset)?;
    trainer.run(on_checkpoint)?;
    Ok(trainer.state)
}

/// Mean of the last `window` entries of `history` ending at `step` (1-based).
pub fn smoothed_total(history: &[LossRecord], step: usize, window: usize) -> f64 {
    let end = step.min(history.len());
    let start = end.saturating_sub(window);
    let slice = &history[start..end];
    slice.iter().map(|r| r.total).sum::<f64>() / slice.len().max(1) as f64
}

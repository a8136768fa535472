use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cell::{HyperIds, LstmIds};
use super::gmm::{apply_temperature, raw_len, sample_point, GmmParams};
use super::params::{Init, ParamId, Params, ParamsBuilder};
use super::tape::{Node, Tape};
use super::{CellKind, ModelConfig, ModelError};
use crate::ink::{PenState, Stroke5Row, Stroke5Sequence};
use crate::num;
use crate::segmentation::MAX_MODEL_LEN;

/// Diagonal Gaussian over the latent code; `sigma = exp(sigma_hat / 2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDistribution {
    pub mu: Vec<f64>,
    pub sigma_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub z: Vec<f64>,
}

/// Reparameterized draw `z = mu + exp(sigma_hat / 2) * noise`; `None` gives `z = mu`.
pub fn sample_latent(dist: &LatentDistribution, noise: Option<&[f64]>) -> LatentCode {
    match noise {
        None => LatentCode { z: dist.mu.clone() },
        Some(n) => LatentCode {
            z: dist.mu.iter().zip(&dist.sigma_hat).zip(n).map(|((&m, &s), &e)| m + num::exp(s / 2.0) * e).collect(),
        },
    }
}

/// Decoder recurrent state between inference steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    /// `[h, c]` for the plain cell, `[h, c, hyper_h, hyper_c]` for the hypernetwork cell.
    pub parts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum DecoderIds {
    Plain(LstmIds),
    Hyper(HyperIds),
}

#[derive(Debug, Clone)]
struct Layout {
    enc_fwd: LstmIds,
    enc_bwd: LstmIds,
    mu: (ParamId, ParamId),
    sigma: (ParamId, ParamId),
    init: (ParamId, ParamId),
    dec: DecoderIds,
    out: (ParamId, ParamId),
}

impl Layout {
    fn build<R: Rng>(cfg: &ModelConfig, pb: &mut ParamsBuilder<'_, R>) -> Layout {
        let (e, d, nz) = (cfg.enc_units, cfg.dec_units, cfg.latent_dim);
        let enc_fwd = LstmIds::build(pb, "enc.fwd", 5, e, cfg.layer_norm);
        let enc_bwd = LstmIds::build(pb, "enc.bwd", 5, e, cfg.layer_norm);
        let mu = (pb.add("enc.mu.w", nz, 2 * e, Init::Xavier), pb.add("enc.mu.b", nz, 1, Init::Constant(0.0)));
        let sigma =
            (pb.add("enc.sigma.w", nz, 2 * e, Init::Xavier), pb.add("enc.sigma.b", nz, 1, Init::Constant(0.0)));
        let init_width = 2 * d;
        let init =
            (pb.add("dec.init.w", init_width, nz, Init::Xavier), pb.add("dec.init.b", init_width, 1, Init::Constant(0.0)));
        let dec = match cfg.dec_cell {
            CellKind::PlainRecurrent => DecoderIds::Plain(LstmIds::build(pb, "dec.cell", 5 + nz, d, cfg.layer_norm)),
            CellKind::HypernetworkRecurrent => DecoderIds::Hyper(HyperIds::build(
                pb,
                "dec.cell",
                5 + nz,
                d,
                cfg.hyper_units,
                cfg.hyper_embedding,
                cfg.layer_norm,
            )),
        };
        let out_w = raw_len(cfg.mixtures);
        let out = (pb.add("dec.out.w", out_w, d, Init::Xavier), pb.add("dec.out.b", out_w, 1, Init::Constant(0.0)));
        Layout { enc_fwd, enc_bwd, mu, sigma, init, dec, out }
    }
}

/// Random source for recurrent dropout during training.
pub(crate) struct Dropout<'a> {
    pub keep: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask(&mut self, t: &mut Tape<'_>, len: usize) -> Node {
        let keep = self.keep;
        let m: Vec<f64> = (0..len).map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        t.constant(&m)
    }
}

/// Nodes of one recorded training example.
pub(crate) struct LossGraph {
    pub steps: Vec<Node>,
    pub kl: Node,
}

/// Encoder, latent projections, decoder and output head with their weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    /// Offset scale of the training corpus; synthesis divides inputs by it.
    pub data_scale: f64,
    layout: Layout,
}

impl Model {
    /// Fresh model with seeded random weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamsBuilder::new(Some(&mut rng));
        let layout = Layout::build(&config, &mut pb);
        Ok(Model { config, params: pb.params, data_scale: 1.0, layout })
    }

    /// Wraps existing weights, checking every tensor against the config.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Model, ModelError> {
        config.validate()?;
        let mut pb = ParamsBuilder::<ChaCha8Rng>::new(None);
        let layout = Layout::build(&config, &mut pb);
        for expected in &pb.params.tensors {
            let got = params
                .tensors
                .iter()
                .find(|t| t.name == expected.name)
                .ok_or_else(|| ModelError::MissingParam(expected.name.clone()))?;
            if (got.rows, got.cols) != (expected.rows, expected.cols) || got.data.len() != expected.data.len() {
                return Err(ModelError::ParamShape {
                    name: expected.name.clone(),
                    expected: (expected.rows, expected.cols),
                    got: (got.rows, got.cols),
                });
            }
        }
        if params.tensors.len() != pb.params.tensors.len() {
            return Err(ModelError::ShapeMismatch("unexpected extra tensors"));
        }
        // reorder to layout order so ids line up
        let tensors = pb
            .params
            .tensors
            .iter()
            .map(|e| params.tensors.iter().find(|t| t.name == e.name).cloned().expect("checked above"))
            .collect();
        Ok(Model { config, params: Params { tensors }, data_scale: 1.0, layout })
    }

    fn check_input(&self, s5: &Stroke5Sequence) -> Result<(), ModelError> {
        if s5.rows.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if s5.rows.len() > MAX_MODEL_LEN {
            return Err(ModelError::SequenceTooLong(s5.rows.len()));
        }
        Ok(())
    }

    fn record_encoder(&self, t: &mut Tape<'_>, rows: &[Stroke5Row], mut dropout: Option<&mut Dropout<'_>>) -> (Node, Node) {
        let e = self.config.enc_units;
        let inputs: Vec<Node> = rows.iter().map(|r| t.constant(&r.as_input())).collect();
        let run = |t: &mut Tape<'_>, cell: &LstmIds, order: &mut dyn Iterator<Item = &Node>, dropout: &mut Option<&mut Dropout<'_>>| {
            let mut h = t.zeros(e);
            let mut c = t.zeros(e);
            for &x in order {
                let mask = dropout.as_mut().map(|d| d.mask(t, e));
                (h, c) = cell.step(t, &[x], h, c, mask);
            }
            h
        };
        let hf = run(t, &self.layout.enc_fwd, &mut inputs.iter(), &mut dropout);
        let hb = run(t, &self.layout.enc_bwd, &mut inputs.iter().rev(), &mut dropout);
        let mu = t.affine(self.layout.mu.0, &[hf, hb], Some(self.layout.mu.1));
        let sigma_hat = t.affine(self.layout.sigma.0, &[hf, hb], Some(self.layout.sigma.1));
        (mu, sigma_hat)
    }

    fn record_init_state(&self, t: &mut Tape<'_>, z: Node) -> Vec<Node> {
        let d = self.config.dec_units;
        let pre = t.affine(self.layout.init.0, &[z], Some(self.layout.init.1));
        let s = t.tanh(pre);
        let h = t.slice(s, 0, d);
        let c = t.slice(s, d, d);
        match &self.layout.dec {
            DecoderIds::Plain(_) => vec![h, c],
            DecoderIds::Hyper(hy) => {
                let hh = t.zeros(hy.hyper.units);
                let hc = t.zeros(hy.hyper.units);
                vec![h, c, hh, hc]
            }
        }
    }

    /// One decoder step: returns the new state and the raw head output.
    fn record_step(&self, t: &mut Tape<'_>, state: &[Node], prev: Node, z: Node, mask: Option<Node>) -> (Vec<Node>, Node) {
        let new_state = match &self.layout.dec {
            DecoderIds::Plain(cell) => {
                let (h, c) = cell.step(t, &[prev, z], state[0], state[1], mask);
                vec![h, c]
            }
            DecoderIds::Hyper(cell) => cell.step(t, &[prev, z], [state[0], state[1], state[2], state[3]], mask).to_vec(),
        };
        let raw = t.affine(self.layout.out.0, &[new_state[0]], Some(self.layout.out.1));
        (new_state, raw)
    }

    /// Records the full teacher-forced loss graph for one target sequence.
    pub(crate) fn record_loss(
        &self,
        t: &mut Tape<'_>,
        target: &Stroke5Sequence,
        noise: Option<&[f64]>,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<LossGraph, ModelError> {
        self.check_input(target)?;
        let (mu, sigma_hat) = self.record_encoder(t, &target.rows, dropout.as_mut());
        let z = match noise {
            Some(n) => {
                if n.len() != self.config.latent_dim {
                    return Err(ModelError::ShapeMismatch("noise length differs from latent_dim"));
                }
                let eps = t.constant(n);
                let sd = t.exp_scaled(sigma_hat, 0.5);
                let scaled = t.mul(sd, eps);
                t.add(mu, scaled)
            }
            None => mu,
        };
        let mut state = self.record_init_state(t, z);
        let mut steps = Vec::with_capacity(target.rows.len());
        let mut prev = Stroke5Row::START;
        for row in &target.rows {
            let x = t.constant(&prev.as_input());
            let mask = dropout.as_mut().map(|d| d.mask(t, self.config.dec_units));
            let (s, raw) = self.record_step(t, &state, x, z, mask);
            state = s;
            steps.push(t.mixture_nll(raw, self.config.mixtures, *row));
            prev = *row;
        }
        let kl = t.kl(mu, sigma_hat);
        Ok(LossGraph { steps, kl })
    }

    /// Deterministic forward pass of the bidirectional encoder.
    pub fn encode(&self, s5: &Stroke5Sequence) -> Result<LatentDistribution, ModelError> {
        self.check_input(s5)?;
        let mut t = Tape::new(&self.params);
        let (mu, sh) = self.record_encoder(&mut t, &s5.rows, None);
        Ok(LatentDistribution { mu: t.value(mu).to_vec(), sigma_hat: t.value(sh).to_vec() })
    }

    fn check_latent(&self, z: &LatentCode) -> Result<(), ModelError> {
        if z.z.len() != self.config.latent_dim {
            return Err(ModelError::ShapeMismatch("latent code length differs from latent_dim"));
        }
        Ok(())
    }

    /// Decoder state before the first step: `tanh` of an affine map of `z`.
    pub fn initial_state(&self, z: &LatentCode) -> Result<DecoderState, ModelError> {
        self.check_latent(z)?;
        let mut t = Tape::new(&self.params);
        let zn = t.constant(&z.z);
        let nodes = self.record_init_state(&mut t, zn);
        Ok(DecoderState { parts: nodes.iter().map(|&n| t.value(n).to_vec()).collect() })
    }

    /// One inference step from `state` given the previously emitted row.
    pub fn decode_step(
        &self,
        state: &DecoderState,
        prev: &Stroke5Row,
        z: &LatentCode,
    ) -> Result<(GmmParams, DecoderState), ModelError> {
        self.check_latent(z)?;
        let expected = match self.layout.dec {
            DecoderIds::Plain(_) => 2,
            DecoderIds::Hyper(_) => 4,
        };
        if state.parts.len() != expected {
            return Err(ModelError::ShapeMismatch("decoder state has the wrong number of parts"));
        }
        let mut t = Tape::new(&self.params);
        let nodes: Vec<Node> = state.parts.iter().map(|p| t.constant(p)).collect();
        let x = t.constant(&prev.as_input());
        let zn = t.constant(&z.z);
        let (new_state, raw) = self.record_step(&mut t, &nodes, x, zn, None);
        let g = GmmParams::from_raw(t.value(raw), self.config.mixtures);
        Ok((g, DecoderState { parts: new_state.iter().map(|&n| t.value(n).to_vec()).collect() }))
    }

    /// Autoregressive sampling from the start token until an end row is
    /// drawn or `max_len` rows exist (an end row is then appended).
    pub fn generate<R: Rng + ?Sized>(
        &self,
        z: &LatentCode,
        tau: f64,
        max_len: usize,
        mut rng: Option<&mut R>,
    ) -> Result<Stroke5Sequence, ModelError> {
        if max_len > MAX_MODEL_LEN {
            return Err(ModelError::SequenceTooLong(max_len));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(ModelError::OutOfRangeTau(tau));
        }
        let mut state = self.initial_state(z)?;
        let mut prev = Stroke5Row::START;
        let mut rows = Vec::new();
        while rows.len() < max_len {
            let (g, next) = self.decode_step(&state, &prev, z)?;
            let g = apply_temperature(&g, tau)?;
            let row = sample_point(&g, tau, rng.as_deref_mut());
            rows.push(row);
            if row.is_end() {
                break;
            }
            state = next;
            prev = row;
        }
        if rows.last().is_none_or(|r| !r.is_end()) {
            rows.push(Stroke5Row::new(0.0, 0.0, PenState::End));
        }
        Ok(Stroke5Sequence::new(rows))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn param_names(&self) -> Vec<alloc::string::String> {
        self.params.tensors.iter().map(|t| format!("{}[{}x{}]", t.name, t.rows, t.cols)).collect()
    }
}

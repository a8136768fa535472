//! One-shot signature verification with DTW distances, EER and DET.
//!
//! Scores are distances: a probe is accepted when its score is at most the
//! threshold, so `FAR(t)` counts impostor scores `<= t` and `FRR(t)` counts
//! genuine scores `> t`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ink::InkSequence;
use crate::num;
use crate::synthesis::{synthesize_item, ModelRegistry, SynthesisConfig, SynthesisError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("sequence has {0} samples; at least 2 are needed")]
    TooShort(usize),
    #[error("enrolment set is empty")]
    EmptyEnrolment,
    #[error("genuine and impostor score lists must both be nonempty")]
    EmptyScores,
    #[error("no subject has enough samples for a trial")]
    NoTrials,
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

/// Metadata key naming the subject a skilled forgery imitates.
pub const FORGERY_KEY: &str = "forgery_of";

fn features(ink: &InkSequence) -> Result<Vec<(f64, f64)>, EvalError> {
    if ink.len() < 2 {
        return Err(EvalError::TooShort(ink.len()));
    }
    Ok(ink.offsets())
}

/// DTW over per-sample offsets with Euclidean local cost. Among alignments
/// of minimal total cost the shortest is taken, and the total is divided by
/// its number of cells.
pub fn dtw_distance(a: &InkSequence, b: &InkSequence) -> Result<f64, EvalError> {
    let fa = features(a)?;
    let fb = features(b)?;
    Ok(dtw_offsets(&fa, &fb))
}

pub(crate) fn dtw_offsets(fa: &[(f64, f64)], fb: &[(f64, f64)]) -> f64 {
    let m = fb.len();
    // (cost, cells) per column, for the previous and the current row
    let mut prev: Vec<(f64, u32)> = alloc::vec![(f64::INFINITY, 0); m];
    let mut cur = prev.clone();
    let better = |x: (f64, u32), y: (f64, u32)| if y.0 < x.0 || (y.0 == x.0 && y.1 < x.1) { y } else { x };
    for (i, &(ax, ay)) in fa.iter().enumerate() {
        for (j, &(bx, by)) in fb.iter().enumerate() {
            let (dx, dy) = (ax - bx, ay - by);
            let c = num::sqrt(dx * dx + dy * dy);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, u32::MAX);
                if i > 0 {
                    best = better(best, prev[j]);
                }
                if j > 0 {
                    best = better(best, cur[j - 1]);
                }
                if i > 0 && j > 0 {
                    best = better(best, prev[j - 1]);
                }
                best
            };
            cur[j] = (best.0 + c, best.1 + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    let (cost, cells) = prev[m - 1];
    cost / f64::from(cells)
}

/// Smallest distance from `probe` to any enrolment sample.
pub fn verify_score(enrolment: &[InkSequence], probe: &InkSequence) -> Result<f64, EvalError> {
    if enrolment.is_empty() {
        return Err(EvalError::EmptyEnrolment);
    }
    let fp = features(probe)?;
    let mut best = f64::INFINITY;
    for e in enrolment {
        best = best.min(dtw_offsets(&features(e)?, &fp));
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    fn check(&self) -> Result<(), EvalError> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            Err(EvalError::EmptyScores)
        } else {
            Ok(())
        }
    }
}

/// Error counts at one threshold: `accepted` impostors and `rejected` genuines.
#[derive(Debug, Clone, Copy)]
struct Counts {
    threshold: f64,
    accepted: usize,
    rejected: usize,
}

/// Counts at a virtual threshold below every score followed by every
/// distinct score in ascending order.
fn sweep(scores: &ScoreSet) -> Vec<Counts> {
    let mut g = scores.genuine.clone();
    let mut imp = scores.impostor.clone();
    g.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = g.iter().chain(&imp).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut out = Vec::with_capacity(all.len() + 1);
    out.push(Counts { threshold: f64::NEG_INFINITY, accepted: 0, rejected: g.len() });
    let (mut gi, mut ii) = (0, 0);
    for t in all {
        while gi < g.len() && g[gi] <= t {
            gi += 1;
        }
        while ii < imp.len() && imp[ii] <= t {
            ii += 1;
        }
        out.push(Counts { threshold: t, accepted: ii, rejected: g.len() - gi });
    }
    out
}

/// Equal error rate and the (interpolated) threshold where it occurs.
///
/// FAR rises and FRR falls along the sweep; the crossing is found between
/// the last threshold with `FAR < FRR` and the next one, and both rates are
/// interpolated linearly there. The arithmetic is done on integer counts so
/// symmetric cases come out exact.
pub fn compute_eer(scores: &ScoreSet) -> Result<(f64, f64), EvalError> {
    scores.check()?;
    let (ng, ni) = (scores.genuine.len() as i128, scores.impostor.len() as i128);
    let pts = sweep(scores);
    // FAR - FRR scaled by ng * ni
    let diff = |c: &Counts| c.accepted as i128 * ng - c.rejected as i128 * ni;
    let k = pts.iter().position(|c| diff(c) >= 0).expect("the last threshold accepts everything");
    let (lo, hi) = (&pts[k - 1], &pts[k]);
    let (d0, d1) = (diff(lo), diff(hi));
    if d1 == 0 {
        return Ok((hi.accepted as f64 / ni as f64, hi.threshold));
    }
    let (a0, a1) = (lo.accepted as i128, hi.accepted as i128);
    let eer = (a0 * d1 - a1 * d0) as f64 / ((d1 - d0) * ni) as f64;
    let alpha = -d0 as f64 / (d1 - d0) as f64;
    let t0 = if lo.threshold.is_finite() { lo.threshold } else { hi.threshold };
    Ok((eer, t0 + alpha * (hi.threshold - t0)))
}

/// `(FAR, FRR)` at every distinct threshold in ascending order, preceded by
/// `(0, 1)` for a threshold below every score; the last point is `(1, 0)`.
pub fn det_points(scores: &ScoreSet) -> Result<Vec<(f64, f64)>, EvalError> {
    scores.check()?;
    let (ng, ni) = (scores.genuine.len() as f64, scores.impostor.len() as f64);
    Ok(sweep(scores).iter().map(|c| (c.accepted as f64 / ni, c.rejected as f64 / ng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImpostorMode {
    /// Skilled forgeries (samples tagged with [`FORGERY_KEY`]) when the corpus
    /// has any, otherwise other subjects' genuine samples.
    #[default]
    Auto,
    RandomForgery,
    SkilledForgery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub impostors: ImpostorMode,
    /// Cap on random-forgery probes per subject; `None` uses all of them.
    pub impostors_per_subject: Option<usize>,
    /// Picks each subject's enrolment sample and any impostor subset.
    pub seed: u64,
    /// Use each subject's first sample for enrolment instead of a random one.
    pub first_as_enrolment: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol { impostors: ImpostorMode::Auto, impostors_per_subject: None, seed: 0, first_as_enrolment: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTrial {
    pub subject: String,
    /// Index into the dataset of the real enrolment sample.
    pub enrolment: usize,
    pub genuine_probes: Vec<usize>,
    pub impostor_probes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub description: String,
    pub k_synth: usize,
    pub protocol: Protocol,
    pub trials: Vec<SubjectTrial>,
    /// Subjects left out for lack of samples.
    pub skipped: Vec<String>,
    pub scores: ScoreSet,
    pub eer: f64,
    pub eer_threshold: f64,
    pub det_points: Vec<(f64, f64)>,
}

fn is_forgery(ink: &InkSequence) -> bool {
    ink.metadata.contains_key(FORGERY_KEY)
}

/// Builds the trial list for `dataset` without scoring anything.
pub fn plan_trials(dataset: &[InkSequence], protocol: &Protocol) -> (Vec<SubjectTrial>, Vec<String>) {
    let mut genuine: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut forgeries: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ink) in dataset.iter().enumerate() {
        match ink.metadata.get(FORGERY_KEY) {
            Some(target) => forgeries.entry(target.as_str()).or_default().push(i),
            None => genuine.entry(ink.label.as_str()).or_default().push(i),
        }
    }
    let skilled = match protocol.impostors {
        ImpostorMode::Auto => !forgeries.is_empty(),
        ImpostorMode::RandomForgery => false,
        ImpostorMode::SkilledForgery => true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut trials = Vec::new();
    let mut skipped = Vec::new();
    for (subject, own) in &genuine {
        let impostors: Vec<usize> = if skilled {
            forgeries.get(subject).cloned().unwrap_or_default()
        } else {
            let others: Vec<usize> =
                dataset.iter().enumerate().filter(|(_, s)| s.label != *subject && !is_forgery(s)).map(|(i, _)| i).collect();
            match protocol.impostors_per_subject {
                Some(cap) if cap < others.len() => {
                    let mut picked: Vec<usize> = sample(&mut rng, others.len(), cap).into_iter().map(|k| others[k]).collect();
                    picked.sort_unstable();
                    picked
                }
                _ => others,
            }
        };
        if own.len() < 2 || impostors.is_empty() {
            skipped.push(String::from(*subject));
            continue;
        }
        let e = if protocol.first_as_enrolment { 0 } else { rng.random_range(0..own.len()) };
        trials.push(SubjectTrial {
            subject: String::from(*subject),
            enrolment: own[e],
            genuine_probes: own.iter().copied().filter(|&i| i != own[e]).collect(),
            impostor_probes: impostors,
        });
    }
    (trials, skipped)
}

/// One real enrolment sample per subject, optionally augmented with
/// `k_synth` synthetic copies of it, scored against genuine and impostor
/// probes.
pub fn one_shot_experiment(
    dataset: &[InkSequence],
    registry: &ModelRegistry,
    k_synth: usize,
    cfg: &SynthesisConfig,
    protocol: &Protocol,
) -> Result<VerificationReport, EvalError> {
    let (trials, skipped) = plan_trials(dataset, protocol);
    if trials.is_empty() {
        return Err(EvalError::NoTrials);
    }
    let mut scores = ScoreSet::default();
    for (s, trial) in trials.iter().enumerate() {
        let real = &dataset[trial.enrolment];
        let mut enrolment = alloc::vec![real.clone()];
        if k_synth > 0 {
            let item_cfg = SynthesisConfig { n_samples: k_synth, ..cfg.clone() };
            enrolment.extend(synthesize_item(real, s, registry, &item_cfg)?.outputs);
        }
        for &p in &trial.genuine_probes {
            scores.genuine.push(verify_score(&enrolment, &dataset[p])?);
        }
        for &p in &trial.impostor_probes {
            scores.impostor.push(verify_score(&enrolment, &dataset[p])?);
        }
    }
    let (eer, eer_threshold) = compute_eer(&scores)?;
    let det_points = det_points(&scores)?;
    let description = format!(
        "one-shot, 1 real + {k_synth} synthetic (tau {}, w_kl model {}), {} subjects",
        cfg.tau,
        cfg.w_kl_model,
        trials.len()
    );
    Ok(VerificationReport { description, k_synth, protocol: protocol.clone(), trials, skipped, scores, eer, eer_threshold, det_points })
}

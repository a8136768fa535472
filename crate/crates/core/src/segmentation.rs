//! Velocity-profile segmentation into short-term strokes and lossless reassembly.
//!
//! The speed profile is split into four regions by the thresholds
//! `mu - sigma`, `mu` and `mu + sigma`. A new segment starts wherever the
//! profile moves from one region to another and wherever the pen leaves the
//! surface. Short pieces are folded into their left neighbour and pieces the
//! recurrent model cannot handle are halved until they fit.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ink::{InkError, InkSequence, NormalizationRecord};
use crate::num;

/// Longest sequence the encoder accepts.
pub const MAX_MODEL_LEN: usize = 300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentError {
    #[error(transparent)]
    Ink(#[from] InkError),
    #[error("timestamped derivative requested but the sequence has no timestamps")]
    MissingTimestamps,
    #[error("timestamps {0} and {1} are equal")]
    ZeroDt(usize, usize),
    #[error("expected {expected} synthetic segments, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("invalid policy: {0}")]
    InvalidPolicy(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Derivative {
    /// Difference of consecutive samples.
    #[default]
    UnitStep,
    /// Difference divided by the timestamp step.
    Timestamped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityProfile {
    pub v: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
}

impl VelocityProfile {
    /// `[mu - sigma, mu, mu + sigma]`.
    pub fn thresholds(&self) -> [f64; 3] {
        [self.mu - self.sigma, self.mu, self.mu + self.sigma]
    }

    /// Which thresholds the profile crosses between `n - 1` and `n`, as a
    /// bit set (bit 0 = `mu - sigma`). A value equal to a threshold counts
    /// as below it.
    pub fn crossings_at(&self, n: usize) -> u8 {
        let mut bits = 0;
        for (k, t) in self.thresholds().iter().enumerate() {
            if (self.v[n] > *t) != (self.v[n - 1] > *t) {
                bits |= 1 << k;
            }
        }
        bits
    }
}

/// Speed magnitude per sample; `v[0]` is defined as 0.
pub fn velocity_profile(ink: &InkSequence, derivative: Derivative) -> Result<VelocityProfile, SegmentError> {
    let n = ink.samples.len();
    if n < 2 {
        return Err(InkError::EmptySequence(n).into());
    }
    let mut v = Vec::with_capacity(n);
    v.push(0.0);
    for i in 1..n {
        let (a, b) = (&ink.samples[i - 1], &ink.samples[i]);
        let (mut dx, mut dy) = (b.x - a.x, b.y - a.y);
        if derivative == Derivative::Timestamped {
            let (ta, tb) = match (a.t, b.t) {
                (Some(ta), Some(tb)) => (ta, tb),
                _ => return Err(SegmentError::MissingTimestamps),
            };
            let dt = tb - ta;
            if dt == 0.0 {
                return Err(SegmentError::ZeroDt(i - 1, i));
            }
            dx /= dt;
            dy /= dt;
        }
        v.push(num::sqrt(dx * dx + dy * dy));
    }
    let (mu, sigma) = num::mean_std(&v);
    Ok(VelocityProfile { v, mu, sigma })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationMode {
    /// One segment spanning the whole sequence.
    None,
    #[default]
    Velocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationPolicy {
    pub mode: SegmentationMode,
    pub min_len: usize,
    pub max_len: usize,
    pub derivative: Derivative,
}

impl Default for SegmentationPolicy {
    fn default() -> Self {
        SegmentationPolicy { mode: SegmentationMode::Velocity, min_len: 5, max_len: 250, derivative: Derivative::UnitStep }
    }
}

impl SegmentationPolicy {
    pub fn whole() -> Self {
        SegmentationPolicy { mode: SegmentationMode::None, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), SegmentError> {
        if self.min_len < 2 {
            return Err(SegmentError::InvalidPolicy("min_len must be at least 2"));
        }
        if self.max_len > MAX_MODEL_LEN {
            return Err(SegmentError::InvalidPolicy("max_len must not exceed 300"));
        }
        // halving a segment just over max_len must not produce pieces below min_len
        if 2 * self.min_len > self.max_len {
            return Err(SegmentError::InvalidPolicy("max_len must be at least twice min_len"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BoundaryCause {
    SequenceStart,
    SequenceEnd,
    /// `which` is 1, 2 or 3 for `mu - sigma`, `mu`, `mu + sigma` (lowest crossed).
    ThresholdCrossing { which: u8 },
    PenUp,
    /// Midpoint cut of a piece longer than `max_len`.
    LengthSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_idx: usize,
    /// Inclusive.
    pub end_idx: usize,
    /// Why this segment starts where it does.
    pub cause: BoundaryCause,
    /// Why it ends where it does.
    pub end_cause: BoundaryCause,
    /// Original start point (and the normalization scale once one is applied).
    pub placement: NormalizationRecord,
    pub end_point: (f64, f64),
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end_idx - self.start_idx + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn extract(&self, ink: &InkSequence) -> InkSequence {
        ink.slice(self.start_idx, self.end_idx)
    }
}

/// Raw boundary candidates: indices `n >= 1` where a segment would start.
pub fn boundary_candidates(ink: &InkSequence, profile: &VelocityProfile) -> Vec<(usize, BoundaryCause)> {
    let mut out = Vec::new();
    for n in 1..ink.samples.len() {
        if ink.samples[n - 1].pen_down && !ink.samples[n].pen_down {
            out.push((n, BoundaryCause::PenUp));
            continue;
        }
        let bits = profile.crossings_at(n);
        if bits != 0 {
            out.push((n, BoundaryCause::ThresholdCrossing { which: bits.trailing_zeros() as u8 + 1 }));
        }
    }
    out
}

/// Splits `ink` into contiguous, non-overlapping segments per `policy`.
pub fn segment(ink: &InkSequence, policy: &SegmentationPolicy) -> Result<Vec<Segment>, SegmentError> {
    policy.validate()?;
    let n = ink.samples.len();
    if n < 2 {
        return Err(InkError::EmptySequence(n).into());
    }
    // (start, cause) pairs; segment k spans starts[k]..starts[k+1]-1
    let mut starts: Vec<(usize, BoundaryCause)> = Vec::new();
    starts.push((0, BoundaryCause::SequenceStart));
    if policy.mode == SegmentationMode::Velocity {
        let profile = velocity_profile(ink, policy.derivative)?;
        starts.extend(boundary_candidates(ink, &profile));

        merge_short(&mut starts, n, policy.min_len);
        split_long(&mut starts, n, policy.max_len);
    }

    let mut segments = Vec::with_capacity(starts.len());
    for (k, &(start, cause)) in starts.iter().enumerate() {
        let (end, end_cause) = match starts.get(k + 1) {
            Some(&(next, next_cause)) => (next - 1, next_cause),
            None => (n - 1, BoundaryCause::SequenceEnd),
        };
        let s = &ink.samples[start];
        let e = &ink.samples[end];
        segments.push(Segment {
            start_idx: start,
            end_idx: end,
            cause,
            end_cause,
            placement: NormalizationRecord::at((s.x, s.y)),
            end_point: (e.x, e.y),
        });
    }
    Ok(segments)
}

fn seg_len(starts: &[(usize, BoundaryCause)], k: usize, n: usize) -> usize {
    let end = starts.get(k + 1).map_or(n, |s| s.0);
    end - starts[k].0
}

/// Folds pieces shorter than `min_len` into their left neighbour; a short
/// leading piece absorbs its right neighbour instead.
fn merge_short(starts: &mut Vec<(usize, BoundaryCause)>, n: usize, min_len: usize) {
    let mut k = 1;
    while k < starts.len() {
        if seg_len(starts, k, n) < min_len {
            starts.remove(k);
        } else {
            k += 1;
        }
    }
    while starts.len() > 1 && seg_len(starts, 0, n) < min_len {
        starts.remove(1);
    }
}

fn split_long(starts: &mut Vec<(usize, BoundaryCause)>, n: usize, max_len: usize) {
    let mut k = 0;
    while k < starts.len() {
        let len = seg_len(starts, k, n);
        if len > max_len {
            let mid = starts[k].0 + len / 2;
            starts.insert(k + 1, (mid, BoundaryCause::LengthSplit));
        } else {
            k += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    /// Each synthetic piece starts at its original segment's start point.
    #[default]
    Absolute,
    /// Each synthetic piece continues from the previous synthetic piece,
    /// keeping the original gap between segments.
    Chained,
}

/// Stitches synthetic segments back together in the original order.
pub fn reassemble(
    segments: &[Segment],
    synthetic: &[InkSequence],
    mode: PlacementMode,
) -> Result<InkSequence, SegmentError> {
    if segments.len() != synthetic.len() {
        return Err(SegmentError::CountMismatch { expected: segments.len(), got: synthetic.len() });
    }
    let mut out = InkSequence::default();
    if let Some(first) = synthetic.first() {
        out.label = first.label.clone();
        out.metadata = first.metadata.clone();
    }
    let keep_time = synthetic.iter().all(|s| s.has_timestamps());
    let mut prev_last: Option<(f64, f64)> = None;
    for (k, (seg, syn)) in segments.iter().zip(synthetic).enumerate() {
        let Some((fx, fy)) = syn.first_point() else {
            return Err(InkError::EmptySequence(0).into());
        };
        let target = match (mode, prev_last) {
            (PlacementMode::Chained, Some((px, py))) => {
                let gap = (seg.placement.origin.0 - segments[k - 1].end_point.0, seg.placement.origin.1 - segments[k - 1].end_point.1);
                (px + gap.0, py + gap.1)
            }
            _ => seg.placement.origin,
        };
        let (tx, ty) = (target.0 - fx, target.1 - fy);
        for s in &syn.samples {
            let mut s = *s;
            s.x += tx;
            s.y += ty;
            if !keep_time {
                s.t = None;
            }
            out.samples.push(s);
        }
        prev_last = out.last_point();
    }
    Ok(out)
}

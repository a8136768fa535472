//! On-line ink data model and the offset ("stroke-5") codec.
//!
//! An [`InkSequence`] is what a digitizer captures: absolute coordinates,
//! optional timestamps and a pen state per sample. The recurrent model works
//! on [`Stroke5Sequence`]s instead, where each row is the displacement to the
//! next sample plus a one-hot pen state describing that destination sample.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InkError {
    #[error("sequence needs at least 2 samples, got {0}")]
    EmptySequence(usize),
    #[error("row {0} does not carry exactly one pen bit")]
    MalformedRows(usize),
    #[error("stroke-5 sequence must end with exactly one terminal row")]
    MissingTerminal,
    #[error("sample {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("timestamps decrease at sample {0}")]
    DecreasingTime(usize),
    #[error("timestamps must be present on every sample or on none")]
    PartialTimestamps,
    #[error("offset standard deviation is zero")]
    DegenerateScale,
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InkSample {
    pub x: f64,
    pub y: f64,
    /// Seconds; absent when the source has no clock.
    pub t: Option<f64>,
    pub pen_down: bool,
}

impl InkSample {
    pub fn new(x: f64, y: f64, pen_down: bool) -> Self {
        InkSample { x, y, t: None, pen_down }
    }

    pub fn at(x: f64, y: f64, t: f64, pen_down: bool) -> Self {
        InkSample { x, y, t: Some(t), pen_down }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InkSequence {
    pub samples: Vec<InkSample>,
    /// Digit class or subject id.
    pub label: String,
    pub metadata: BTreeMap<String, String>,
}

impl InkSequence {
    pub fn new(samples: Vec<InkSample>, label: impl Into<String>) -> Self {
        InkSequence { samples, label: label.into(), metadata: BTreeMap::new() }
    }

    /// Pen-down polyline without timestamps.
    pub fn from_points(points: &[(f64, f64)], label: impl Into<String>) -> Self {
        let samples = points.iter().map(|&(x, y)| InkSample::new(x, y, true)).collect();
        Self::new(samples, label)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_timestamps(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.t.is_some())
    }

    pub fn first_point(&self) -> Option<(f64, f64)> {
        self.samples.first().map(|s| (s.x, s.y))
    }

    pub fn last_point(&self) -> Option<(f64, f64)> {
        self.samples.last().map(|s| (s.x, s.y))
    }

    /// Checks the ingestion invariants: at least two samples, finite
    /// coordinates, timestamps all-or-none and non-decreasing.
    pub fn validate(&self) -> Result<(), InkError> {
        if self.samples.len() < 2 {
            return Err(InkError::EmptySequence(self.samples.len()));
        }
        let timed = self.samples[0].t.is_some();
        let mut prev_t = f64::NEG_INFINITY;
        for (i, s) in self.samples.iter().enumerate() {
            if !s.x.is_finite() || !s.y.is_finite() {
                return Err(InkError::NonFinite(i));
            }
            match (timed, s.t) {
                (true, Some(t)) => {
                    if t < prev_t {
                        return Err(InkError::DecreasingTime(i));
                    }
                    prev_t = t;
                }
                (false, None) => {}
                _ => return Err(InkError::PartialTimestamps),
            }
        }
        Ok(())
    }

    /// Inclusive sub-sequence `[start, end]` carrying the same label and metadata.
    pub fn slice(&self, start: usize, end: usize) -> InkSequence {
        InkSequence {
            samples: self.samples[start..=end].to_vec(),
            label: self.label.clone(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn translate(&mut self, dx: f64, dy: f64) {
        for s in &mut self.samples {
            s.x += dx;
            s.y += dy;
        }
    }

    /// Per-sample displacement features `(x[i+1] - x[i], y[i+1] - y[i])`.
    pub fn offsets(&self) -> Vec<(f64, f64)> {
        self.samples.windows(2).map(|w| (w[1].x - w[0].x, w[1].y - w[0].y)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenState {
    /// Destination sample is on the surface.
    Down,
    /// Destination sample is in the air.
    Up,
    /// Last row of the sequence.
    End,
}

impl PenState {
    pub fn one_hot(self) -> [u8; 3] {
        match self {
            PenState::Down => [1, 0, 0],
            PenState::Up => [0, 1, 0],
            PenState::End => [0, 0, 1],
        }
    }

    pub fn index(self) -> usize {
        match self {
            PenState::Down => 0,
            PenState::Up => 1,
            PenState::End => 2,
        }
    }

    pub fn from_index(i: usize) -> PenState {
        match i {
            0 => PenState::Down,
            1 => PenState::Up,
            _ => PenState::End,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stroke5Row {
    pub dx: f64,
    pub dy: f64,
    /// `[p1, p2, p3]`: pen down, pen up, end of sequence.
    pub pen: [u8; 3],
}

impl Stroke5Row {
    pub fn new(dx: f64, dy: f64, state: PenState) -> Self {
        Stroke5Row { dx, dy, pen: state.one_hot() }
    }

    /// Decoder start token `(0, 0, 1, 0, 0)`.
    pub const START: Stroke5Row = Stroke5Row { dx: 0.0, dy: 0.0, pen: [1, 0, 0] };

    pub fn state(&self) -> Option<PenState> {
        match self.pen {
            [1, 0, 0] => Some(PenState::Down),
            [0, 1, 0] => Some(PenState::Up),
            [0, 0, 1] => Some(PenState::End),
            _ => None,
        }
    }

    pub fn is_end(&self) -> bool {
        self.pen[2] == 1
    }

    pub fn as_input(&self) -> [f64; 5] {
        [
            self.dx,
            self.dy,
            f64::from(self.pen[0]),
            f64::from(self.pen[1]),
            f64::from(self.pen[2]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stroke5Sequence {
    pub rows: Vec<Stroke5Row>,
    pub origin: (f64, f64),
    /// Device units per row unit.
    pub scale: f64,
    /// Pen state of the origin sample, which no row describes.
    pub start_pen_down: bool,
    /// Pen state of the final sample, whose row only marks the end.
    pub end_pen_down: bool,
}

impl Stroke5Sequence {
    pub fn new(rows: Vec<Stroke5Row>) -> Self {
        Stroke5Sequence { rows, origin: (0.0, 0.0), scale: 1.0, start_pen_down: true, end_pen_down: true }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// One-hot pen bits everywhere and exactly one terminal row, placed last.
    pub fn validate(&self) -> Result<(), InkError> {
        if self.rows.is_empty() {
            return Err(InkError::MissingTerminal);
        }
        let last = self.rows.len() - 1;
        for (i, r) in self.rows.iter().enumerate() {
            let state = r.state().ok_or(InkError::MalformedRows(i))?;
            if (state == PenState::End) != (i == last) {
                return Err(InkError::MissingTerminal);
            }
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(InkError::InvalidScale(self.scale));
        }
        Ok(())
    }

    /// Offsets as a flat `[dx0, dy0, dx1, dy1, ...]` list.
    pub fn offset_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().flat_map(|r| [r.dx, r.dy])
    }
}

/// Offset-encodes `ink`. Timestamps are dropped.
pub fn to_stroke5(ink: &InkSequence) -> Result<Stroke5Sequence, InkError> {
    let n = ink.samples.len();
    if n < 2 {
        return Err(InkError::EmptySequence(n));
    }
    let rows = ink
        .samples
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let state = if i + 2 == n {
                PenState::End
            } else if w[1].pen_down {
                PenState::Down
            } else {
                PenState::Up
            };
            Stroke5Row::new(w[1].x - w[0].x, w[1].y - w[0].y, state)
        })
        .collect();
    Ok(Stroke5Sequence {
        rows,
        origin: (ink.samples[0].x, ink.samples[0].y),
        scale: 1.0,
        start_pen_down: ink.samples[0].pen_down,
        end_pen_down: ink.samples[n - 1].pen_down,
    })
}

/// Decodes offsets back to absolute coordinates: `origin + scale * cumsum`.
pub fn from_stroke5(s5: &Stroke5Sequence) -> Result<InkSequence, InkError> {
    s5.validate()?;
    let mut samples = Vec::with_capacity(s5.rows.len() + 1);
    samples.push(InkSample::new(s5.origin.0, s5.origin.1, s5.start_pen_down));
    let (mut cx, mut cy) = (0.0, 0.0);
    for r in &s5.rows {
        cx += r.dx;
        cy += r.dy;
        let pen_down = match r.state() {
            Some(PenState::Down) => true,
            Some(PenState::Up) => false,
            _ => s5.end_pen_down,
        };
        samples.push(InkSample::new(s5.origin.0 + s5.scale * cx, s5.origin.1 + s5.scale * cy, pen_down));
    }
    Ok(InkSequence::new(samples, String::new()))
}

/// Placement and scale needed to undo normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub origin: (f64, f64),
    pub scale: f64,
}

impl NormalizationRecord {
    pub fn at(origin: (f64, f64)) -> Self {
        NormalizationRecord { origin, scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum ScaleMode {
    /// Use the standard deviation of this sequence's own offsets.
    PerSequence,
    /// Use a corpus-level scale computed beforehand (see [`corpus_scale`]).
    Fixed(f64),
    /// Leave offsets as they are.
    #[default]
    Identity,
}

/// Population standard deviation of all `dx` and `dy` values pooled together.
pub fn offset_std<'a>(seqs: impl IntoIterator<Item = &'a Stroke5Sequence>) -> f64 {
    let values: Vec<f64> = seqs.into_iter().flat_map(|s| s.offset_values()).collect();
    num::mean_std(&values).1
}

/// Corpus-level normalization scale.
pub fn corpus_scale<'a>(seqs: impl IntoIterator<Item = &'a Stroke5Sequence>) -> Result<f64, InkError> {
    let s = offset_std(seqs);
    if s > 0.0 && s.is_finite() {
        Ok(s)
    } else {
        Err(InkError::DegenerateScale)
    }
}

/// Divides the offsets by a scale; `from_stroke5` of the result still
/// yields the original coordinates because `scale` absorbs the factor.
pub fn normalize(s5: &Stroke5Sequence, mode: ScaleMode) -> Result<(Stroke5Sequence, NormalizationRecord), InkError> {
    if s5.rows.is_empty() {
        return Err(InkError::EmptySequence(0));
    }
    let scale = match mode {
        ScaleMode::Identity => 1.0,
        ScaleMode::Fixed(s) => {
            if !(s.is_finite() && s > 0.0) {
                return Err(InkError::InvalidScale(s));
            }
            s
        }
        ScaleMode::PerSequence => corpus_scale([s5])?,
    };
    Ok(rescale(s5, scale))
}

/// Like [`normalize`] but falls back to `scale = 1` on a degenerate
/// sequence; the flag reports whether the fallback happened.
pub fn normalize_or_identity(s5: &Stroke5Sequence, mode: ScaleMode) -> (Stroke5Sequence, NormalizationRecord, bool) {
    match normalize(s5, mode) {
        Ok((s, r)) => (s, r, false),
        Err(_) => {
            let (s, r) = rescale(s5, 1.0);
            (s, r, true)
        }
    }
}

fn rescale(s5: &Stroke5Sequence, scale: f64) -> (Stroke5Sequence, NormalizationRecord) {
    let mut out = s5.clone();
    if scale != 1.0 {
        for r in &mut out.rows {
            r.dx /= scale;
            r.dy /= scale;
        }
        out.scale = s5.scale * scale;
    }
    (out, NormalizationRecord { origin: s5.origin, scale })
}

pub fn denormalize(s5: &Stroke5Sequence, record: &NormalizationRecord) -> Stroke5Sequence {
    let mut out = s5.clone();
    if record.scale != 1.0 {
        for r in &mut out.rows {
            r.dx *= record.scale;
            r.dy *= record.scale;
        }
        out.scale = s5.scale / record.scale;
    }
    out.origin = record.origin;
    out
}

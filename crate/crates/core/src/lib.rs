//! Short-term on-line handwriting synthesis.
//!
//! The pipeline cuts a pen trajectory into short strokes at velocity
//! threshold crossings and pen lifts, re-draws every stroke with a
//! sequence-to-sequence variational autoencoder, and stitches the results
//! back together in the original order. Synthetic copies of a single
//! enrolment sample can then be used to augment one-shot verification.
//!
//! This crate is `no_std` (it needs `alloc`). File formats, checkpoints and
//! the command-line tool live in the `strokesyn` crate.

#![no_std]
extern crate alloc;

pub mod evaluation;
pub mod ink;
mod num;
pub mod segmentation;
pub mod synthesis;
pub mod toy;
pub mod training;
pub mod vae;

pub use ink::{InkSample, InkSequence, NormalizationRecord, PenState, Stroke5Row, Stroke5Sequence};
pub use evaluation::{ScoreSet, VerificationReport};
pub use segmentation::{Segment, SegmentationPolicy, VelocityProfile};
pub use synthesis::{ModelRegistry, Normalization, SynthesisConfig, SynthesisReport};
pub use vae::{GmmParams, LatentCode, LatentDistribution, Model, ModelConfig};

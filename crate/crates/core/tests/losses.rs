use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strokesyn_core::ink::{PenState, Stroke5Row, Stroke5Sequence};
use strokesyn_core::training::{kl_loss, reconstruction_loss, total_loss, TrainError};
use strokesyn_core::vae::{apply_temperature, sample_latent, sample_point, GmmParams, LatentDistribution};

fn random_gmm(rng: &mut impl Rng, m: usize) -> GmmParams {
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

fn random_target(rng: &mut impl Rng, len: usize) -> Stroke5Sequence {
    let rows = (0..len)
        .map(|i| {
            let state = if i + 1 == len { PenState::End } else if rng.random_bool(0.8) { PenState::Down } else { PenState::Up };
            Stroke5Row::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), state)
        })
        .collect();
    Stroke5Sequence::new(rows)
}

/// Plain-arithmetic mixture density, no log-space tricks.
fn direct_loss(params: &[GmmParams], target: &Stroke5Sequence) -> f64 {
    let mut offset = 0.0;
    let mut pen = 0.0;
    for (g, row) in params.iter().zip(&target.rows) {
        let mut density = 0.0;
        for k in 0..g.pi.len() {
            let zx = (row.dx - g.mu_x[k]) / g.sigma_x[k];
            let zy = (row.dy - g.mu_y[k]) / g.sigma_y[k];
            let q = 1.0 - g.rho[k] * g.rho[k];
            let z = zx * zx + zy * zy - 2.0 * g.rho[k] * zx * zy;
            density += g.pi[k] * (-z / (2.0 * q)).exp() / (2.0 * PI * g.sigma_x[k] * g.sigma_y[k] * q.sqrt());
        }
        offset -= density.ln();
        let e: Vec<f64> = g.pen_logits.iter().map(|q| q.exp()).collect();
        let sum: f64 = e.iter().sum();
        for k in 0..3 {
            pen -= f64::from(row.pen[k]) * (e[k] / sum).ln();
        }
    }
    let n = target.len() as f64;
    offset / n + pen / n
}

#[test]
fn reconstruction_loss_matches_direct_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let m = rng.random_range(1..6);
        let len = rng.random_range(1..12);
        let params: Vec<GmmParams> = (0..len).map(|_| random_gmm(&mut rng, m)).collect();
        let target = random_target(&mut rng, len);
        let got = reconstruction_loss(&params, &target).unwrap();
        let want = direct_loss(&params, &target);
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn density_one_at_the_mode_gives_zero_loss() {
    let s = 1.0 / (2.0 * PI).sqrt();
    let g = GmmParams { pi: vec![1.0], mu_x: vec![0.3], mu_y: vec![-0.7], sigma_x: vec![s], sigma_y: vec![s], rho: vec![0.0], pen_logits: [0.0, -800.0, 800.0] };
    let target = Stroke5Sequence::new(vec![Stroke5Row::new(0.3, -0.7, PenState::End)]);
    assert!(reconstruction_loss(&[g.clone()], &target).unwrap().abs() <= 1e-9);
    let mut wide = g;
    wide.sigma_x[0] *= 2.0;
    assert!(reconstruction_loss(&[wide], &target).unwrap() > 0.0);
}

#[test]
fn length_mismatch_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = vec![random_gmm(&mut rng, 2); 3];
    let target = random_target(&mut rng, 4);
    assert!(matches!(reconstruction_loss(&params, &target), Err(TrainError::LengthMismatch { .. })));
}

fn dist(mu: Vec<f64>, sigma_hat: Vec<f64>) -> LatentDistribution {
    LatentDistribution { mu, sigma_hat }
}

#[test]
fn kl_closed_forms() {
    for nz in [1, 4, 128] {
        assert_eq!(kl_loss(&dist(vec![0.0; nz], vec![0.0; nz])), 0.0);
        assert!((kl_loss(&dist(vec![1.0; nz], vec![0.0; nz])) - 0.5).abs() <= 1e-12);
    }
    assert_eq!(total_loss(2.0, 0.5, 1.0), 2.5);
    assert_eq!(total_loss(2.0, 0.5, 0.25), 2.125);
    assert_eq!(total_loss(1.7, 9.0, 0.0), 1.7);
}

proptest! {
    #[test]
    fn kl_matches_termwise_and_is_nonnegative(v in prop::collection::vec((-4.0..4.0f64, -6.0..3.0f64), 1..40)) {
        let d = dist(v.iter().map(|p| p.0).collect(), v.iter().map(|p| p.1).collect());
        let mut want = 0.0;
        for (m, s) in &v {
            want += 1.0 + s - m * m - s.exp();
        }
        want *= -1.0 / (2.0 * v.len() as f64);
        let got = kl_loss(&d);
        prop_assert!(got >= 0.0);
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn temperature_keeps_the_heaviest_component(seed in any::<u64>(), tau in 0.01..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_gmm(&mut rng, 5);
        let t = apply_temperature(&g, tau).unwrap();
        t.validate().unwrap();
        let argmax = |p: &[f64]| p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(argmax(&t.pi), argmax(&g.pi));
        prop_assert_eq!(argmax(&t.pen_logits), argmax(&g.pen_logits));
        for k in 0..5 {
            prop_assert!((t.sigma_x[k] * t.sigma_x[k] - tau * g.sigma_x[k] * g.sigma_x[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn temperature_one_is_identity_and_range_is_checked() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random_gmm(&mut rng, 4);
    assert_eq!(apply_temperature(&g, 1.0).unwrap(), g);
    assert!(apply_temperature(&g, 1.5).is_err());
    assert!(apply_temperature(&g, -0.1).is_err());
}

#[test]
fn greedy_sampling_ignores_the_rng() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = random_gmm(&mut rng, 3);
    let first = sample_point(&g, 0.0, Some(&mut rng));
    for _ in 0..100 {
        let again = sample_point(&g, 0.0, Some(&mut rng));
        assert_eq!((again.dx.to_bits(), again.dy.to_bits(), again.pen), (first.dx.to_bits(), first.dy.to_bits(), first.pen));
    }
}

#[test]
fn correlated_draws_have_the_component_covariance() {
    let g = GmmParams { pi: vec![1.0], mu_x: vec![1.0], mu_y: vec![-2.0], sigma_x: vec![0.5], sigma_y: vec![2.0], rho: vec![0.6], pen_logits: [0.0; 3] };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 50_000;
    let draws: Vec<(f64, f64)> = (0..n).map(|_| sample_point(&g, 1.0, Some(&mut rng))).map(|r| (r.dx, r.dy)).collect();
    let mx = draws.iter().map(|d| d.0).sum::<f64>() / n as f64;
    let my = draws.iter().map(|d| d.1).sum::<f64>() / n as f64;
    let cov = draws.iter().map(|d| (d.0 - mx) * (d.1 - my)).sum::<f64>() / n as f64;
    let want = 0.6 * 0.5 * 2.0;
    assert!((cov - want).abs() < 0.03, "cov {cov} vs {want}");
}

#[test]
fn latent_draws_follow_mu_and_sigma() {
    let d = dist(vec![0.5, -1.0], vec![0.0, (0.25f64).ln()]);
    assert_eq!(sample_latent(&d, None).z, d.mu);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 40_000;
    let mut sums = [[0.0; 2]; 2];
    for _ in 0..n {
        let noise: [f64; 2] = [rng.sample(rand_distr::StandardNormal), rng.sample(rand_distr::StandardNormal)];
        let z = sample_latent(&d, Some(&noise)).z;
        for k in 0..2 {
            sums[k][0] += z[k];
            sums[k][1] += z[k] * z[k];
        }
    }
    for (k, want_sd) in [1.0, 0.5].into_iter().enumerate() {
        let mean = sums[k][0] / n as f64;
        let var = sums[k][1] / n as f64 - mean * mean;
        assert!((mean - d.mu[k]).abs() < 4.0 * want_sd / (n as f64).sqrt());
        assert!((var.sqrt() / want_sd - 1.0).abs() < 0.02);
    }
}

//! Mixture-density output head: bivariate-normal mixture over the next
//! offset plus a three-way pen categorical.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ink::{PenState, Stroke5Row};
use crate::num;
use crate::vae::ModelError;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-step decoder output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub pi: Vec<f64>,
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub sigma_x: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub rho: Vec<f64>,
    pub pen_logits: [f64; 3],
}

/// Width of the raw head output for `m` components.
pub const fn raw_len(m: usize) -> usize {
    6 * m + 3
}

impl GmmParams {
    /// Maps raw head activations `[pi logits | mu_x | mu_y | ln sigma_x |
    /// ln sigma_y | atanh rho | pen logits]` onto valid parameters.
    pub fn from_raw(raw: &[f64], m: usize) -> GmmParams {
        debug_assert_eq!(raw.len(), raw_len(m));
        let mut pi = alloc::vec![0.0; m];
        num::softmax_into(&raw[..m], &mut pi);
        let chunk = |k: usize| &raw[k * m..(k + 1) * m];
        GmmParams {
            pi,
            mu_x: chunk(1).to_vec(),
            mu_y: chunk(2).to_vec(),
            sigma_x: chunk(3).iter().map(|&a| num::exp(a)).collect(),
            sigma_y: chunk(4).iter().map(|&a| num::exp(a)).collect(),
            rho: chunk(5).iter().map(|&c| num::tanh(c)).collect(),
            pen_logits: [raw[6 * m], raw[6 * m + 1], raw[6 * m + 2]],
        }
    }

    pub fn components(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let m = self.pi.len();
        let lens = [self.mu_x.len(), self.mu_y.len(), self.sigma_x.len(), self.sigma_y.len(), self.rho.len()];
        if m == 0 || lens.iter().any(|&l| l != m) {
            return Err(ModelError::ShapeMismatch("mixture component vectors differ in length"));
        }
        let sum: f64 = self.pi.iter().sum();
        if self.pi.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(ModelError::InvalidMixture("weights are not a distribution"));
        }
        if self.sigma_x.iter().chain(&self.sigma_y).any(|&s| !(s > 0.0)) {
            return Err(ModelError::InvalidMixture("non-positive sigma"));
        }
        if self.rho.iter().any(|&r| !(r.abs() < 1.0)) {
            return Err(ModelError::InvalidMixture("|rho| >= 1"));
        }
        Ok(())
    }

    /// Log of component `k`'s bivariate-normal density at `(dx, dy)`.
    pub fn component_log_pdf(&self, k: usize, dx: f64, dy: f64) -> f64 {
        bivariate_log_pdf(dx, dy, self.mu_x[k], self.mu_y[k], self.sigma_x[k], self.sigma_y[k], self.rho[k])
    }

    /// `ln sum_k pi_k N((dx, dy) | k)`.
    pub fn log_density(&self, dx: f64, dy: f64) -> f64 {
        let terms: Vec<f64> =
            (0..self.components()).map(|k| num::ln(self.pi[k]) + self.component_log_pdf(k, dx, dy)).collect();
        num::log_sum_exp(&terms)
    }

    pub fn pen_log_probs(&self) -> [f64; 3] {
        let lse = num::log_sum_exp(&self.pen_logits);
        [self.pen_logits[0] - lse, self.pen_logits[1] - lse, self.pen_logits[2] - lse]
    }

    pub fn pen_probs(&self) -> [f64; 3] {
        let mut p = [0.0; 3];
        num::softmax_into(&self.pen_logits, &mut p);
        p
    }

    /// Offset negative log-likelihood plus pen cross-entropy for one row.
    pub fn step_nll(&self, row: &Stroke5Row) -> f64 {
        let lp = self.pen_log_probs();
        let pen: f64 = (0..3).map(|k| f64::from(row.pen[k]) * lp[k]).sum();
        -self.log_density(row.dx, row.dy) - pen
    }
}

pub(crate) fn bivariate_log_pdf(dx: f64, dy: f64, mx: f64, my: f64, sx: f64, sy: f64, rho: f64) -> f64 {
    let zx = (dx - mx) / sx;
    let zy = (dy - my) / sy;
    let q = 1.0 - rho * rho;
    let z = zx * zx + zy * zy - 2.0 * rho * zx * zy;
    -LN_2PI - num::ln(sx) - num::ln(sy) - 0.5 * num::ln(q) - z / (2.0 * q)
}

/// Sharpens (`tau < 1`) the mixture: categorical logits are divided by
/// `tau` and component variances multiplied by it. `tau = 1` is the
/// identity; `tau = 0` returns the input untouched and is interpreted as
/// greedy decoding by [`sample_point`].
pub fn apply_temperature(g: &GmmParams, tau: f64) -> Result<GmmParams, ModelError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(ModelError::OutOfRangeTau(tau));
    }
    if tau == 1.0 || tau == 0.0 {
        return Ok(g.clone());
    }
    let logits: Vec<f64> = g.pi.iter().map(|&p| num::ln(p) / tau).collect();
    let mut pi = alloc::vec![0.0; logits.len()];
    num::softmax_into(&logits, &mut pi);
    let s = num::sqrt(tau);
    Ok(GmmParams {
        pi,
        mu_x: g.mu_x.clone(),
        mu_y: g.mu_y.clone(),
        sigma_x: g.sigma_x.iter().map(|v| v * s).collect(),
        sigma_y: g.sigma_y.iter().map(|v| v * s).collect(),
        rho: g.rho.clone(),
        pen_logits: g.pen_logits.map(|q| q / tau),
    })
}

/// Draws the next row. With `tau == 0` or no random source this is the
/// mean of the heaviest component and the most likely pen state.
pub fn sample_point<R: Rng + ?Sized>(g: &GmmParams, tau: f64, rng: Option<&mut R>) -> Stroke5Row {
    let rng = match rng {
        Some(r) if tau > 0.0 => r,
        _ => {
            let k = num::argmax(&g.pi);
            let pen = num::argmax(&g.pen_logits);
            return Stroke5Row::new(g.mu_x[k], g.mu_y[k], PenState::from_index(pen));
        }
    };
    let k = sample_categorical(&g.pi, rng);
    let n1: f64 = StandardNormal.sample(rng);
    let n2: f64 = StandardNormal.sample(rng);
    let rho = g.rho[k];
    let dx = g.mu_x[k] + g.sigma_x[k] * n1;
    let dy = g.mu_y[k] + g.sigma_y[k] * (rho * n1 + num::sqrt(1.0 - rho * rho) * n2);
    let pen = sample_categorical(&g.pen_probs(), rng);
    Stroke5Row::new(dx, dy, PenState::from_index(pen))
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left `acc` just under 1; take the last non-zero entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

//! Minimal reverse-mode differentiation over vectors of `f64`.
//!
//! Values live in one flat arena; every recorded op knows how to push its
//! output gradient back to its inputs and into the parameter gradients.

use alloc::vec;
use alloc::vec::Vec;

use super::gmm::{raw_len, GmmParams};
use super::params::{Grads, ParamId, Params};
use crate::ink::Stroke5Row;
use crate::num;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    /// `W [x_0; x_1; ...] + b`; inputs are `edges[start..start + count]`.
    Affine { w: ParamId, b: Option<ParamId>, start: usize, count: usize },
    Add(Node, Node),
    Mul(Node, Node),
    Sigmoid(Node),
    Tanh(Node),
    /// `exp(scale * x)`
    Exp(Node, f64),
    Slice(Node, usize),
    LayerNorm { x: Node, gain: ParamId, bias: ParamId },
    /// Mixture negative log-likelihood of one target row (scalar).
    MixtureNll { y: Node, m: usize, target: Stroke5Row },
    /// KL divergence of `N(mu, exp(sigma_hat))` from `N(0, I)`, averaged over dims (scalar).
    Kl { mu: Node, sigma_hat: Node },
}

#[derive(Debug, Clone)]
struct Entry {
    op: Op,
    offset: usize,
    len: usize,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p Params,
    entries: Vec<Entry>,
    edges: Vec<Node>,
    values: Vec<f64>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Params) -> Self {
        Tape { params, entries: Vec::new(), edges: Vec::new(), values: Vec::new() }
    }

    pub fn value(&self, n: Node) -> &[f64] {
        let e = &self.entries[n.0];
        &self.values[e.offset..e.offset + e.len]
    }

    pub fn scalar(&self, n: Node) -> f64 {
        self.value(n)[0]
    }

    fn push(&mut self, op: Op, len: usize, needs_grad: bool) -> (Node, usize) {
        let offset = self.values.len();
        self.values.resize(offset + len, 0.0);
        self.entries.push(Entry { op, offset, len, needs_grad });
        (Node(self.entries.len() - 1), offset)
    }

    fn grad_flag(&self, n: Node) -> bool {
        self.entries[n.0].needs_grad
    }

    fn range(&self, n: Node) -> (usize, usize) {
        let e = &self.entries[n.0];
        (e.offset, e.len)
    }

    pub fn constant(&mut self, v: &[f64]) -> Node {
        let (n, off) = self.push(Op::Const, v.len(), false);
        self.values[off..off + v.len()].copy_from_slice(v);
        n
    }

    pub fn zeros(&mut self, len: usize) -> Node {
        self.push(Op::Const, len, false).0
    }

    pub fn affine(&mut self, w: ParamId, inputs: &[Node], b: Option<ParamId>) -> Node {
        let params = self.params;
        let wt = params.get(w);
        let cols: usize = inputs.iter().map(|&x| self.range(x).1).sum();
        assert_eq!(cols, wt.cols, "affine {}: input width {} != {}", wt.name, cols, wt.cols);
        let start = self.edges.len();
        self.edges.extend_from_slice(inputs);
        let (n, off) = self.push(Op::Affine { w, b, start, count: inputs.len() }, wt.rows, true);
        let (before, out) = self.values.split_at_mut(off);
        let out = &mut out[..wt.rows];
        if let Some(b) = b {
            out.copy_from_slice(&params.get(b).data);
        }
        let mut col0 = 0;
        for &x in inputs {
            let e = &self.entries[x.0];
            let xv = &before[e.offset..e.offset + e.len];
            for (r, o) in out.iter_mut().enumerate() {
                let row = &wt.data[r * wt.cols + col0..r * wt.cols + col0 + e.len];
                *o += dot(row, xv);
            }
            col0 += e.len;
        }
        n
    }

    fn binary(&mut self, a: Node, b: Node, op: Op, f: impl Fn(f64, f64) -> f64) -> Node {
        let (ao, al) = self.range(a);
        let (bo, bl) = self.range(b);
        assert_eq!(al, bl);
        let g = self.grad_flag(a) || self.grad_flag(b);
        let (n, off) = self.push(op, al, g);
        for i in 0..al {
            self.values[off + i] = f(self.values[ao + i], self.values[bo + i]);
        }
        n
    }

    fn unary(&mut self, a: Node, op: Op, f: impl Fn(f64) -> f64) -> Node {
        let (ao, al) = self.range(a);
        let g = self.grad_flag(a);
        let (n, off) = self.push(op, al, g);
        for i in 0..al {
            self.values[off + i] = f(self.values[ao + i]);
        }
        n
    }

    pub fn add(&mut self, a: Node, b: Node) -> Node {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Node {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn sigmoid(&mut self, a: Node) -> Node {
        self.unary(a, Op::Sigmoid(a), num::sigmoid)
    }

    pub fn tanh(&mut self, a: Node) -> Node {
        self.unary(a, Op::Tanh(a), num::tanh)
    }

    pub fn exp_scaled(&mut self, a: Node, scale: f64) -> Node {
        self.unary(a, Op::Exp(a, scale), |x| num::exp(scale * x))
    }

    pub fn slice(&mut self, a: Node, offset: usize, len: usize) -> Node {
        let (ao, al) = self.range(a);
        assert!(offset + len <= al);
        let g = self.grad_flag(a);
        let (n, off) = self.push(Op::Slice(a, offset), len, g);
        self.values.copy_within(ao + offset..ao + offset + len, off);
        n
    }

    pub fn layer_norm(&mut self, x: Node, gain: ParamId, bias: ParamId) -> Node {
        let (xo, xl) = self.range(x);
        let (n, off) = self.push(Op::LayerNorm { x, gain, bias }, xl, true);
        let (mean, inv) = moments(&self.values[xo..xo + xl]);
        let g = &self.params.get(gain).data;
        let b = &self.params.get(bias).data;
        for i in 0..xl {
            self.values[off + i] = g[i] * (self.values[xo + i] - mean) * inv + b[i];
        }
        n
    }

    pub fn mixture_nll(&mut self, y: Node, m: usize, target: Stroke5Row) -> Node {
        assert_eq!(self.range(y).1, raw_len(m));
        let g = GmmParams::from_raw(self.value(y), m);
        let v = g.step_nll(&target);
        let (n, off) = self.push(Op::MixtureNll { y, m, target }, 1, true);
        self.values[off] = v;
        n
    }

    pub fn kl(&mut self, mu: Node, sigma_hat: Node) -> Node {
        let v = kl_value(self.value(mu), self.value(sigma_hat));
        let (n, off) = self.push(Op::Kl { mu, sigma_hat }, 1, true);
        self.values[off] = v;
        n
    }

    /// Propagates `d loss / d node = weight` for each seed back through the
    /// tape, accumulating parameter gradients into `grads`.
    pub fn backward(&self, seeds: &[(Node, f64)], grads: &mut Grads) {
        let mut g = vec![0.0; self.values.len()];
        for &(n, w) in seeds {
            let (o, l) = self.range(n);
            g[o..o + l].iter_mut().for_each(|v| *v += w);
        }
        let mut scratch: Vec<f64> = Vec::new();
        for idx in (0..self.entries.len()).rev() {
            let e = &self.entries[idx];
            if !e.needs_grad {
                continue;
            }
            scratch.clear();
            scratch.extend_from_slice(&g[e.offset..e.offset + e.len]);
            if scratch.iter().all(|&v| v == 0.0) {
                continue;
            }
            let dy = &scratch[..];
            let out = &self.values[e.offset..e.offset + e.len];
            match e.op {
                Op::Const => {}
                Op::Affine { w, b, start, count } => {
                    let wt = self.params.get(w);
                    if let Some(b) = b {
                        for (gb, d) in grads.data[b.0].iter_mut().zip(dy) {
                            *gb += d;
                        }
                    }
                    let gw = &mut grads.data[w.0];
                    let mut col0 = 0;
                    for &x in &self.edges[start..start + count] {
                        let xe = &self.entries[x.0];
                        let xv = &self.values[xe.offset..xe.offset + xe.len];
                        for (r, &d) in dy.iter().enumerate() {
                            if d == 0.0 {
                                continue;
                            }
                            let base = r * wt.cols + col0;
                            axpy(d, xv, &mut gw[base..base + xe.len]);
                        }
                        if xe.needs_grad {
                            let gx = &mut g[xe.offset..xe.offset + xe.len];
                            for (r, &d) in dy.iter().enumerate() {
                                if d == 0.0 {
                                    continue;
                                }
                                let base = r * wt.cols + col0;
                                axpy(d, &wt.data[base..base + xe.len], gx);
                            }
                        }
                        col0 += xe.len;
                    }
                }
                Op::Add(a, b) => {
                    for x in [a, b] {
                        if self.grad_flag(x) {
                            let (o, l) = self.range(x);
                            axpy(1.0, dy, &mut g[o..o + l]);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ao, al) = self.range(a);
                    let (bo, _) = self.range(b);
                    if self.grad_flag(a) {
                        for i in 0..al {
                            g[ao + i] += dy[i] * self.values[bo + i];
                        }
                    }
                    if self.grad_flag(b) {
                        for i in 0..al {
                            g[bo + i] += dy[i] * self.values[ao + i];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let (ao, _) = self.range(a);
                    for i in 0..dy.len() {
                        g[ao + i] += dy[i] * out[i] * (1.0 - out[i]);
                    }
                }
                Op::Tanh(a) => {
                    let (ao, _) = self.range(a);
                    for i in 0..dy.len() {
                        g[ao + i] += dy[i] * (1.0 - out[i] * out[i]);
                    }
                }
                Op::Exp(a, s) => {
                    let (ao, _) = self.range(a);
                    for i in 0..dy.len() {
                        g[ao + i] += dy[i] * s * out[i];
                    }
                }
                Op::Slice(a, offset) => {
                    let (ao, _) = self.range(a);
                    axpy(1.0, dy, &mut g[ao + offset..ao + offset + dy.len()]);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (xo, xl) = self.range(x);
                    let xv = &self.values[xo..xo + xl];
                    let (mean, inv) = moments(xv);
                    let gain_v = &self.params.get(gain).data;
                    let n = xl as f64;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for i in 0..xl {
                        let xhat = (xv[i] - mean) * inv;
                        grads.data[gain.0][i] += dy[i] * xhat;
                        grads.data[bias.0][i] += dy[i];
                        let dxhat = dy[i] * gain_v[i];
                        sum_d += dxhat;
                        sum_dx += dxhat * xhat;
                    }
                    if self.grad_flag(x) {
                        for i in 0..xl {
                            let xhat = (xv[i] - mean) * inv;
                            let dxhat = dy[i] * gain_v[i];
                            g[xo + i] += inv * (dxhat - sum_d / n - xhat * sum_dx / n);
                        }
                    }
                }
                Op::MixtureNll { y, m, target } => {
                    let (yo, yl) = self.range(y);
                    let raw = &self.values[yo..yo + yl];
                    let mut dr = vec![0.0; yl];
                    mixture_nll_grad(raw, m, &target, &mut dr);
                    axpy(dy[0], &dr, &mut g[yo..yo + yl]);
                }
                Op::Kl { mu, sigma_hat } => {
                    let (mo, ml) = self.range(mu);
                    let (so, _) = self.range(sigma_hat);
                    let nz = ml as f64;
                    for i in 0..ml {
                        let m = self.values[mo + i];
                        let s = self.values[so + i];
                        g[mo + i] += dy[0] * m / nz;
                        g[so + i] += dy[0] * (num::exp(s) - 1.0) / (2.0 * nz);
                    }
                }
            }
        }
    }
}

pub(crate) fn kl_value(mu: &[f64], sigma_hat: &[f64]) -> f64 {
    let nz = mu.len() as f64;
    let s: f64 = mu.iter().zip(sigma_hat).map(|(&m, &s)| 1.0 + s - m * m - num::exp(s)).sum();
    -s / (2.0 * nz)
}

/// Gradient of the per-row mixture NLL with respect to the raw head output.
fn mixture_nll_grad(raw: &[f64], m: usize, target: &Stroke5Row, out: &mut [f64]) {
    let g = GmmParams::from_raw(raw, m);
    let (dx, dy) = (target.dx, target.dy);
    let log_terms: Vec<f64> = (0..m).map(|k| num::ln(g.pi[k]) + g.component_log_pdf(k, dx, dy)).collect();
    let mut gamma = vec![0.0; m];
    num::softmax_into(&log_terms, &mut gamma);
    for k in 0..m {
        let (sx, sy, rho) = (g.sigma_x[k], g.sigma_y[k], g.rho[k]);
        let zx = (dx - g.mu_x[k]) / sx;
        let zy = (dy - g.mu_y[k]) / sy;
        let q = 1.0 - rho * rho;
        let z = zx * zx + zy * zy - 2.0 * rho * zx * zy;
        // d ln N / d (mu_x, mu_y, ln sx, ln sy, rho)
        let d_mx = (zx - rho * zy) / (q * sx);
        let d_my = (zy - rho * zx) / (q * sy);
        let d_lsx = -1.0 + zx * (zx - rho * zy) / q;
        let d_lsy = -1.0 + zy * (zy - rho * zx) / q;
        let d_rho = rho / q + zx * zy / q - z * rho / (q * q);
        let gk = gamma[k];
        out[k] = g.pi[k] - gk;
        out[m + k] = -gk * d_mx;
        out[2 * m + k] = -gk * d_my;
        out[3 * m + k] = -gk * d_lsx;
        out[4 * m + k] = -gk * d_lsy;
        out[5 * m + k] = -gk * d_rho * q;
    }
    let p = g.pen_probs();
    for k in 0..3 {
        out[6 * m + k] = p[k] - f64::from(target.pen[k]);
    }
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / num::sqrt(var + LN_EPS))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

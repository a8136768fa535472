//! Recurrent cells recorded on the tape.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::params::{Init, ParamId, ParamsBuilder};
use super::tape::{Node, Tape};

/// Gate order inside the stacked pre-activation: input, candidate, forget, output.
const FORGET: usize = 2;

#[derive(Debug, Clone)]
pub(crate) struct LstmIds {
    pub units: usize,
    pub w: ParamId,
    /// Affine bias when layer norm is off.
    pub b: Option<ParamId>,
    /// `(gain, bias)` for the four gates and the cell state.
    pub ln: Option<[(ParamId, ParamId); 5]>,
}

impl LstmIds {
    pub fn build<R: Rng>(pb: &mut ParamsBuilder<'_, R>, prefix: &str, input: usize, units: usize, layer_norm: bool) -> Self {
        let w = pb.add(format!("{prefix}.w"), 4 * units, input + units, Init::Xavier);
        if layer_norm {
            let ln = core::array::from_fn(|k| {
                let bias_init = if k == FORGET { 1.0 } else { 0.0 };
                (
                    pb.add(format!("{prefix}.ln{k}.gain"), units, 1, Init::Constant(1.0)),
                    pb.add(format!("{prefix}.ln{k}.bias"), units, 1, Init::Constant(bias_init)),
                )
            });
            LstmIds { units, w, b: None, ln: Some(ln) }
        } else {
            let b = pb.add(format!("{prefix}.b"), 4 * units, 1, Init::Constant(0.0));
            pb.params.get_mut(b).data[FORGET * units..(FORGET + 1) * units].iter_mut().for_each(|v| *v = 1.0);
            LstmIds { units, w, b: Some(b), ln: None }
        }
    }

    /// One step; `inputs` are concatenated in order ahead of the hidden state.
    pub fn step(&self, t: &mut Tape<'_>, inputs: &[Node], h: Node, c: Node, mask: Option<Node>) -> (Node, Node) {
        let mut all: Vec<Node> = inputs.to_vec();
        all.push(h);
        let pre = t.affine(self.w, &all, self.b);
        gates_to_state(t, pre, self.units, self.ln.as_ref(), c, mask)
    }
}

/// Shared tail of both cells: per-gate layer norm, nonlinearities and the
/// cell/hidden update. `mask` scales the candidate (recurrent dropout).
fn gates_to_state(
    t: &mut Tape<'_>,
    pre: Node,
    units: usize,
    ln: Option<&[(ParamId, ParamId); 5]>,
    c: Node,
    mask: Option<Node>,
) -> (Node, Node) {
    let gate = |t: &mut Tape<'_>, k: usize| {
        let g = t.slice(pre, k * units, units);
        match ln {
            Some(ln) => t.layer_norm(g, ln[k].0, ln[k].1),
            None => g,
        }
    };
    let i = gate(t, 0);
    let j = gate(t, 1);
    let f = gate(t, FORGET);
    let o = gate(t, 3);
    let i = t.sigmoid(i);
    let mut j = t.tanh(j);
    let f = t.sigmoid(f);
    let o = t.sigmoid(o);
    if let Some(mask) = mask {
        j = t.mul(j, mask);
    }
    let keep = t.mul(f, c);
    let write = t.mul(i, j);
    let c_new = t.add(keep, write);
    let c_out = match ln {
        Some(ln) => t.layer_norm(c_new, ln[4].0, ln[4].1),
        None => c_new,
    };
    let squashed = t.tanh(c_out);
    let h_new = t.mul(o, squashed);
    (h_new, c_new)
}

/// Hypernetwork-modulated LSTM: an auxiliary LSTM reads the cell input and
/// the main hidden state, and its output produces per-unit scales for the
/// input projection, the recurrent projection and the bias.
#[derive(Debug, Clone)]
pub(crate) struct HyperIds {
    pub units: usize,
    pub hyper: LstmIds,
    pub wx: ParamId,
    pub wh: ParamId,
    /// `(embedding w, embedding b, scale w, scale b)` for input, recurrent, bias.
    pub heads: [(ParamId, ParamId, ParamId, ParamId); 3],
    pub ln: Option<[(ParamId, ParamId); 5]>,
}

impl HyperIds {
    pub fn build<R: Rng>(
        pb: &mut ParamsBuilder<'_, R>,
        prefix: &str,
        input: usize,
        units: usize,
        hyper_units: usize,
        embedding: usize,
        layer_norm: bool,
    ) -> Self {
        let hyper = LstmIds::build(pb, &format!("{prefix}.hyper"), input + units, hyper_units, layer_norm);
        let wx = pb.add(format!("{prefix}.wx"), 4 * units, input, Init::Xavier);
        let wh = pb.add(format!("{prefix}.wh"), 4 * units, units, Init::Xavier);
        let names = ["x", "h", "b"];
        let heads = core::array::from_fn(|k| {
            let scale_init = if k < 2 { 1.0 } else { 0.0 };
            (
                pb.add(format!("{prefix}.z{}.w", names[k]), embedding, hyper_units, Init::Xavier),
                pb.add(format!("{prefix}.z{}.b", names[k]), embedding, 1, Init::Constant(0.0)),
                pb.add(format!("{prefix}.d{}.w", names[k]), 4 * units, embedding, Init::Xavier),
                pb.add(format!("{prefix}.d{}.b", names[k]), 4 * units, 1, Init::Constant(scale_init)),
            )
        });
        let ln = if layer_norm {
            Some(core::array::from_fn(|k| {
                let bias_init = if k == FORGET { 1.0 } else { 0.0 };
                (
                    pb.add(format!("{prefix}.ln{k}.gain"), units, 1, Init::Constant(1.0)),
                    pb.add(format!("{prefix}.ln{k}.bias"), units, 1, Init::Constant(bias_init)),
                )
            }))
        } else {
            None
        };
        HyperIds { units, hyper, wx, wh, heads, ln }
    }

    /// `state` is `[h, c, hyper_h, hyper_c]`.
    pub fn step(&self, t: &mut Tape<'_>, inputs: &[Node], state: [Node; 4], mask: Option<Node>) -> [Node; 4] {
        let [h, c, hh, hc] = state;
        let mut hyper_in: Vec<Node> = inputs.to_vec();
        hyper_in.push(h);
        let (hh, hc) = self.hyper.step(t, &hyper_in, hh, hc, None);
        let mut scales = [hh; 3];
        for (k, &(zw, zb, dw, db)) in self.heads.iter().enumerate() {
            let z = t.affine(zw, &[hh], Some(zb));
            scales[k] = t.affine(dw, &[z], Some(db));
        }
        let wx = t.affine(self.wx, inputs, None);
        let wh = t.affine(self.wh, &[h], None);
        let a = t.mul(scales[0], wx);
        let b = t.mul(scales[1], wh);
        let ab = t.add(a, b);
        let pre = t.add(ab, scales[2]);
        let (h, c) = gates_to_state(t, pre, self.units, self.ln.as_ref(), c, mask);
        [h, c, hh, hc]
    }
}

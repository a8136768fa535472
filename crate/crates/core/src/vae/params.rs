use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Index of a tensor inside [`Params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named row-major matrix (vectors have `cols == 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// All trainable weights, addressable by name or id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads { data: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }
}

/// Gradient buffers with the same layout as [`Params`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grads {
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v *= f);
        }
    }

    pub fn norm(&self) -> f64 {
        crate::num::sqrt(self.data.iter().flatten().map(|v| v * v).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }
}

/// Initialization recipe for a tensor.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Constant(f64),
}

/// Appends named tensors while handing out their ids.
pub(crate) struct ParamsBuilder<'r, R: Rng> {
    pub params: Params,
    rng: Option<&'r mut R>,
}

impl<'r, R: Rng> ParamsBuilder<'r, R> {
    /// With `rng = None` every tensor is zero-filled (used when loading).
    pub fn new(rng: Option<&'r mut R>) -> Self {
        ParamsBuilder { params: Params::default(), rng }
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> ParamId {
        let n = rows * cols;
        let data = match (&mut self.rng, init) {
            (None, _) => vec![0.0; n],
            (Some(_), Init::Constant(c)) => vec![c; n],
            (Some(rng), Init::Xavier) => {
                let a = crate::num::sqrt(6.0 / (rows + cols) as f64);
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
        };
        self.params.tensors.push(Tensor { name: name.into(), rows, cols, data });
        ParamId(self.params.tensors.len() - 1)
    }
}

//! Named, ordered parameter storage and matching gradient buffers.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
}

/// Ordered parameter set. Order is registration order and defines the flat
/// layout used by checkpoints and the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for e in &self.entries {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(shape_err!(
                "flat parameter vector has {} values, model needs {}",
                flat.len(),
                self.num_scalars()
            ));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            e.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            grads: self
                .entries
                .iter()
                .map(|e| Tensor::zeros_like(&e.value))
                .collect(),
        }
    }
}

/// Gradient buffer laid out like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        self.grads[id.0].add_assign(g);
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.grads {
            out.extend_from_slice(g.data());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(
            self.grads
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|v| v * v)
                .sum::<f64>(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.grads {
            *g = g.scale(k);
        }
    }
}

/// Uniform fan-in initialisation for a conv weight `(co, ci, k·k)` feeding a
/// leaky ReLU with the given negative slope.
pub fn kaiming_uniform(
    rng: &mut impl Rng,
    co: usize,
    ci: usize,
    taps: usize,
    slope: f64,
) -> Tensor {
    let fan_in = (ci * taps) as f64;
    let bound = libm::sqrt(6.0 / ((1.0 + slope * slope) * fan_in));
    let mut t = Tensor::zeros(co, ci, taps);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

//! Parameterised convolution layers on top of [`Graph`].

use alloc::format;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Negative slope of every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Fan-in uniform for a following leaky ReLU.
    Kaiming,
    Zero,
    /// Centre tap 1 on matching channels, every other weight 0.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

#[allow(clippy::too_many_arguments)]
impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut impl Rng,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let taps = k * k;
        let w = match init {
            Init::Kaiming => kaiming_uniform(rng, co, ci, taps, LEAKY_SLOPE),
            Init::Zero => Tensor::zeros(co, ci, taps),
            Init::Identity => Tensor::from_fn(co, ci, taps, |o, i, t| {
                if o == i && t == taps / 2 {
                    1.0
                } else {
                    0.0
                }
            }),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(co, 1, 1));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
            padding: Padding::Zero,
        }
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d_padded(x, w, Some(b), self.stride, self.pad, self.padding)
    }

    /// Convolution followed by a leaky ReLU.
    pub fn forward_act(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.forward(g, store, x)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }
}

/// 2×2 stride-2 transposed convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut impl Rng,
        ci: usize,
        co: usize,
    ) -> Self {
        let fan = kaiming_uniform(rng, ci, co, 4, LEAKY_SLOPE);
        // each output pixel sees ci inputs, not co·4
        let k = libm::sqrt((co * 4) as f64 / ci as f64);
        let weight = store.add(format!("{name}.weight"), fan.scale(k));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(co, 1, 1));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv_transpose2(x, w, Some(b))
    }
}

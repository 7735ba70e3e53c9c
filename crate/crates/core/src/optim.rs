//! Adam with a cosine learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

/// Cosine decay from `initial` at step 0 to `floor` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub initial: f64,
    pub floor: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub const DEFAULT_INITIAL: f64 = 1e-4;
    pub const DEFAULT_FLOOR: f64 = 1e-6;

    pub fn new(initial: f64, floor: f64, total_steps: usize) -> Result<Self> {
        if !(initial > 0.0 && initial.is_finite()) || !(0.0..=initial).contains(&floor) {
            return Err(Error::Param(format!(
                "learning rate schedule needs 0 <= floor <= initial, got {floor} and {initial}"
            )));
        }
        Ok(Self {
            initial,
            floor,
            total_steps,
        })
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.initial;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.floor
            + 0.5 * (self.initial - self.floor) * (1.0 + libm::cos(core::f64::consts::PI * t))
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub const MOMENTUM: f64 = 0.9;

    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros_like(store.get(id)))
            .collect();
        Self {
            beta1: Self::MOMENTUM,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Restore saved moments.
    pub fn from_state(
        store: &ParamStore,
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Result<Self> {
        let mut adam = Self::new(store);
        if m.len() != adam.m.len() || v.len() != adam.v.len() {
            return Err(shape_err!(
                "optimizer state has {} moments for {} parameters",
                m.len(),
                adam.m.len()
            ));
        }
        for ((a, b), p) in m.iter().zip(&v).zip(&adam.m) {
            if a.shape() != p.shape() || b.shape() != p.shape() {
                return Err(shape_err!(
                    "optimizer moment {:?} for parameter {:?}",
                    a.shape(),
                    p.shape()
                ));
            }
        }
        adam.step = step;
        adam.m = m;
        adam.v = v;
        Ok(adam)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One update with learning rate `lr`. Non-finite gradients leave the
    /// parameters untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        if grads.tensors().len() != self.m.len() {
            return Err(shape_err!(
                "{} gradients for {} parameters",
                grads.tensors().len(),
                self.m.len()
            ));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at optimizer step {}",
                self.step
            )));
        }
        self.step += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads.tensors()[i].data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
        Ok(())
    }
}

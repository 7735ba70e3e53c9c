//! Central finite-difference checks of reverse-mode gradients.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Agreement between analytic and numeric derivatives over the probed
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
    pub fn relative_error(&self) -> f64 {
        let mut diff = 0.0;
        let (mut na, mut nn) = (0.0, 0.0);
        for (a, n) in self.analytic.iter().zip(&self.numeric) {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
        }
        let denom = libm::sqrt(na.max(nn));
        if denom == 0.0 {
            0.0
        } else {
            libm::sqrt(diff) / denom
        }
    }

    /// Largest analytic magnitude; a check of an all-zero gradient is vacuous.
    pub fn max_abs(&self) -> f64 {
        self.analytic.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn probe_indices(len: usize, samples: usize, rng: &mut impl Rng) -> Vec<usize> {
    if samples >= len {
        (0..len).collect()
    } else {
        let mut idx = sample(rng, len, samples).into_vec();
        idx.sort_unstable();
        idx
    }
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(alloc::format!(
            "gradient check needs a scalar output, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Gradient of `f(x)` with respect to the tensor input `x`.
pub fn check_input(
    x: &Tensor,
    step: f64,
    samples: usize,
    rng: &mut impl Rng,
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    scalar(&g, out)?;
    let grads = g.backward(out)?;
    let full = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros_like(x));
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t);
        let out = f(&mut g, v)?;
        scalar(&g, out)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in probe_indices(x.len(), samples, rng) {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * step));
        analytic.push(full.data()[i]);
    }
    Ok(GradCheck { analytic, numeric })
}

/// Gradient of `f(params)` with respect to the parameters in `store`.
pub fn check_params(
    store: &ParamStore,
    step: f64,
    samples: usize,
    rng: &mut impl Rng,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<GradCheck> {
    check_params_matching(store, "", step, samples, rng, f)
}

/// Like [`check_params`], probing only parameters whose name starts with `prefix`.
pub fn check_params_matching(
    store: &ParamStore,
    prefix: &str,
    step: f64,
    samples: usize,
    rng: &mut impl Rng,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar(&g, out)?;
    let grads = g.backward(out)?;
    let mut pg = store.zero_grads();
    grads.accumulate_params(&g, &mut pg);
    let full = pg.flatten();
    let base = store.flatten();
    let mut eligible = Vec::new();
    let mut off = 0;
    for id in store.ids() {
        let n = store.get(id).len();
        if store.name(id).starts_with(prefix) {
            eligible.extend(off..off + n);
        }
        off += n;
    }
    if eligible.is_empty() {
        return Err(Error::Contract(alloc::format!(
            "no parameters named {prefix}*"
        )));
    }
    let mut work = store.clone();
    let mut eval = |flat: &[f64]| -> Result<f64> {
        work.assign_flat(flat)?;
        let mut g = Graph::new();
        let out = f(&mut g, &work)?;
        scalar(&g, out)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut flat = base.clone();
    for k in probe_indices(eligible.len(), samples, rng) {
        let i = eligible[k];
        flat[i] = base[i] + step;
        let p = eval(&flat)?;
        flat[i] = base[i] - step;
        let m = eval(&flat)?;
        flat[i] = base[i];
        numeric.push((p - m) / (2.0 * step));
        analytic.push(full[i]);
    }
    Ok(GradCheck { analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn detects_agreement_and_disagreement() {
        let x = Tensor::from_vec(1, 1, 3, alloc::vec![0.3, -0.2, 0.7]).unwrap();
        let mut rng = stream(1, "gc");
        let good = check_input(&x, 1e-6, 10, &mut rng, |g, v| {
            let y = g.mul(v, v)?;
            let z = g.constant(Tensor::zeros(1, 1, 3));
            g.charbonnier(alloc::vec![(y, z, None)], 1e-3)
        })
        .unwrap();
        assert!(good.relative_error() < 1e-8);
        assert_eq!(good.analytic.len(), 3);
        let bad = GradCheck {
            analytic: alloc::vec![1.0, 2.0],
            numeric: alloc::vec![1.0, 2.5],
        };
        assert!(bad.relative_error() > 0.1);
    }
}

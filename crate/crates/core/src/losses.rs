//! Training objectives over restored clips.
//!
//! Every loss is built on a [`Graph`] so it can be differentiated with
//! respect to the restored frames and, through them, the network. Each
//! per-frame or per-pair term is a whole-frame Charbonnier norm, so a perfect
//! restoration sits at `ε` per term.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;

use crate::degrade::isp::IspParams;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, NormTerm, Var};
use crate::layers::LEAKY_SLOPE;
use crate::motion::SyntheticClip;
use crate::params::kaiming_uniform;
use crate::rng::{derive_seed, StreamRng};
use crate::tensor::Tensor;

pub const CHARBONNIER_EPS: f64 = 1e-3;
pub const DEFAULT_LONG_GAP: usize = 4;

/// Frozen feature network used by the perceptual and relational losses.
pub trait Perceptual {
    /// Feature maps of an RGB image, one per scale.
    fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>>;
}

/// A stack of `conv 3×3 → leaky ReLU → 2× average pool` stages with fixed weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvFeatures {
    stages: Vec<(Tensor, Tensor)>,
}

impl ConvFeatures {
    pub const CHANNELS: [usize; 3] = [16, 32, 64];
    pub const DEFAULT_SEED: u64 = 0x5eed_f00d;

    /// Weights drawn once from a fan-in uniform distribution.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = StreamRng::seed_from_u64(derive_seed(seed, "perceptual"));
        let mut ci = 3;
        let mut stages = Vec::new();
        for co in Self::CHANNELS {
            let w = kaiming_uniform(&mut rng, co, ci, 9, LEAKY_SLOPE);
            stages.push((w, Tensor::zeros(co, 1, 1)));
            ci = co;
        }
        Self { stages }
    }

    /// Externally trained weights, `(co, ci, 9)` and `(co, 1, 1)` per stage.
    pub fn from_stages(stages: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Param(
                "perceptual extractor needs at least one stage".into(),
            ));
        }
        let mut ci = 3;
        for (i, (w, b)) in stages.iter().enumerate() {
            let s = w.shape();
            if s.h != ci || s.w != 9 || b.shape() != crate::tensor::Shape::new(s.c, 1, 1) {
                return Err(shape_err!(
                    "perceptual stage {i}: weight {:?}, bias {:?}, input width {ci}",
                    s,
                    b.shape()
                ));
            }
            if !w.is_finite() || !b.is_finite() {
                return Err(Error::Numeric(format!(
                    "perceptual stage {i} has non-finite weights"
                )));
            }
            ci = s.c;
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[(Tensor, Tensor)] {
        &self.stages
    }

    /// Feature values without gradient tracking.
    pub fn eval(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let f = self.features(&mut g, v)?;
        Ok(f.iter().map(|&v| g.value(v).clone()).collect())
    }
}

impl Default for ConvFeatures {
    fn default() -> Self {
        Self::seeded(Self::DEFAULT_SEED)
    }
}

impl Perceptual for ConvFeatures {
    fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for (w, b) in &self.stages {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(h, w, Some(b), 1, 1)?;
            let y = g.leaky_relu(y, LEAKY_SLOPE);
            h = g.avg_pool2(y)?;
            out.push(h);
        }
        Ok(out)
    }
}

fn check_lengths(restored: &[Var], target: &[Var]) -> Result<()> {
    if restored.len() != target.len() {
        return Err(shape_err!(
            "{} restored frames for {} targets",
            restored.len(),
            target.len()
        ));
    }
    Ok(())
}

fn sum(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let weighted: Vec<(Var, f64)> = terms.iter().map(|&v| (v, 1.0)).collect();
    g.weighted_sum(&weighted)
}

/// `sqrt(Σ mask·(a − b)² + ε²)` on plain tensors.
pub fn charbonnier(a: &Tensor, b: &Tensor, mask: Option<&Tensor>, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let v = g.charbonnier(alloc::vec![(va, vb, mask.cloned())], eps)?;
    Ok(g.value(v).item())
}

/// Reconstruction loss in linear RGB and after the camera pipeline.
pub fn loss_r(
    g: &mut Graph,
    restored: &[Var],
    target: &[Var],
    isp: &IspParams,
    eps: f64,
) -> Result<Var> {
    check_lengths(restored, target)?;
    let mut terms = Vec::with_capacity(2 * restored.len());
    for (&a, &b) in restored.iter().zip(target) {
        terms.push(g.charbonnier(alloc::vec![(a, b, None)], eps)?);
        let (sa, sb) = (g.isp(a, isp)?, g.isp(b, isp)?);
        terms.push(g.charbonnier(alloc::vec![(sa, sb, None)], eps)?);
    }
    sum(g, &terms)
}

fn feature_terms(fa: &[Var], fb: &[Var]) -> Vec<NormTerm> {
    fa.iter().zip(fb).map(|(&a, &b)| (a, b, None)).collect()
}

/// Perceptual loss on sRGB frames.
pub fn loss_p(
    g: &mut Graph,
    phi: &dyn Perceptual,
    restored: &[Var],
    target: &[Var],
    isp: &IspParams,
    eps: f64,
) -> Result<Var> {
    check_lengths(restored, target)?;
    let mut terms = Vec::with_capacity(restored.len());
    for (&a, &b) in restored.iter().zip(target) {
        let (sa, sb) = (g.isp(a, isp)?, g.isp(b, isp)?);
        let (fa, fb) = (phi.features(g, sa)?, phi.features(g, sb)?);
        terms.push(g.charbonnier(feature_terms(&fa, &fb), eps)?);
    }
    sum(g, &terms)
}

/// Data-temporal consistency between restored frames `gap` apart: each frame
/// warped by the clip's known motion should match the later restored frame
/// on pixels where the motion is observed.
pub fn loss_dtc_long(
    g: &mut Graph,
    restored: &[Var],
    clip: &SyntheticClip,
    gap: usize,
    eps: f64,
) -> Result<Var> {
    if restored.len() != clip.len() {
        return Err(shape_err!(
            "{} restored frames for a clip of {}",
            restored.len(),
            clip.len()
        ));
    }
    if gap == 0 || restored.len() <= gap {
        return Err(Error::Contract(format!(
            "temporal gap {gap} needs more than {gap} frames, got {}",
            restored.len()
        )));
    }
    let mut terms = Vec::with_capacity(restored.len() - gap);
    for t in 0..restored.len() - gap {
        let (flow, mask) = clip.pair(t, gap)?;
        let f = g.constant(flow.into_tensor());
        let warped = g.warp(restored[t], f)?;
        terms.push(g.charbonnier(alloc::vec![(warped, restored[t + gap], Some(mask))], eps)?);
    }
    sum(g, &terms)
}

/// [`loss_dtc_long`] between neighbouring frames.
pub fn loss_dtc(g: &mut Graph, restored: &[Var], clip: &SyntheticClip, eps: f64) -> Result<Var> {
    loss_dtc_long(g, restored, clip, 1, eps)
}

/// Relational perception consistency: the feature-space change between
/// consecutive restored frames should match that of the targets.
pub fn loss_rpc(
    g: &mut Graph,
    phi: &dyn Perceptual,
    restored: &[Var],
    target: &[Var],
    eps: f64,
) -> Result<Var> {
    check_lengths(restored, target)?;
    if restored.len() < 2 {
        return Err(Error::Contract(format!(
            "relational loss needs at least 2 frames, got {}",
            restored.len()
        )));
    }
    let fr = restored
        .iter()
        .map(|&v| phi.features(g, v))
        .collect::<Result<Vec<_>>>()?;
    let ft = target
        .iter()
        .map(|&v| phi.features(g, v))
        .collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::with_capacity(restored.len() - 1);
    for t in 0..restored.len() - 1 {
        let mut pair = Vec::with_capacity(fr[t].len());
        for s in 0..fr[t].len() {
            let dr = g.sub(fr[t][s], fr[t + 1][s])?;
            let dt = g.sub(ft[t][s], ft[t + 1][s])?;
            pair.push((dr, dt, None));
        }
        terms.push(g.charbonnier(pair, eps)?);
    }
    sum(g, &terms)
}

/// Weights of the auxiliary terms relative to the reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub perceptual: f64,
    pub dtc: f64,
    pub dtc_long: f64,
    pub rpc: f64,
}

impl LossWeights {
    pub const FULL: LossWeights = LossWeights {
        perceptual: 0.002,
        dtc: 0.5,
        dtc_long: 0.2,
        rpc: 0.001,
    };
    /// Reconstruction only, used for pretraining.
    pub const RECONSTRUCTION: LossWeights = LossWeights {
        perceptual: 0.0,
        dtc: 0.0,
        dtc_long: 0.0,
        rpc: 0.0,
    };

    /// The same weights with every temporal term switched off.
    pub fn without_temporal(self) -> Self {
        Self {
            dtc: 0.0,
            dtc_long: 0.0,
            rpc: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Param(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("perceptual", self.perceptual),
            ("dtc", self.dtc),
            ("dtc_long", self.dtc_long),
            ("rpc", self.rpc),
        ]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::FULL
    }
}

/// Values of every loss term and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub r: f64,
    pub p: f64,
    pub dtc: f64,
    pub dtc_long: f64,
    pub rpc: f64,
    pub total: f64,
}

/// Combine component values. A non-finite component is an error.
pub fn total_loss(
    r: f64,
    p: f64,
    dtc: f64,
    dtc_long: f64,
    rpc: f64,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("L_r", r),
        ("L_p", p),
        ("L_dtc", dtc),
        ("L_dtc_long", dtc_long),
        ("L_rpc", rpc),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss component {name} is {v}")));
        }
    }
    Ok(LossBreakdown {
        r,
        p,
        dtc,
        dtc_long,
        rpc,
        total: r + w.perceptual * p + w.dtc * dtc + w.dtc_long * dtc_long + w.rpc * rpc,
    })
}

/// Which terms to build. Terms with zero weight are skipped unless forced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipObjective {
    pub weights: LossWeights,
    pub long_gap: usize,
    pub eps: f64,
    /// Evaluate zero-weight terms too, for logging.
    pub evaluate_all: bool,
}

impl Default for ClipObjective {
    fn default() -> Self {
        Self {
            weights: LossWeights::FULL,
            long_gap: DEFAULT_LONG_GAP,
            eps: CHARBONNIER_EPS,
            evaluate_all: false,
        }
    }
}

/// The weighted objective of one clip as a graph node plus its breakdown.
/// The long-gap term is dropped when the clip is not longer than the gap.
pub fn clip_loss(
    g: &mut Graph,
    objective: &ClipObjective,
    phi: &dyn Perceptual,
    isp: &IspParams,
    restored: &[Var],
    clip: &SyntheticClip,
) -> Result<(Var, LossBreakdown)> {
    let w = &objective.weights;
    w.validate()?;
    let eps = objective.eps;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Param(format!(
            "Charbonnier epsilon must be positive, got {eps}"
        )));
    }
    let target: Vec<Var> = clip.clean.iter().map(|x| g.constant(x.clone())).collect();
    let wanted = |k: f64| objective.evaluate_all || k > 0.0;
    let lr = loss_r(g, restored, &target, isp, eps)?;
    let mut parts = alloc::vec![(lr, 1.0)];
    let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let lp = if wanted(w.perceptual) {
        Some(loss_p(g, phi, restored, &target, isp, eps)?)
    } else {
        None
    };
    let ld = if wanted(w.dtc) {
        Some(loss_dtc(g, restored, clip, eps)?)
    } else {
        None
    };
    let ll = if wanted(w.dtc_long) && clip.len() > objective.long_gap {
        Some(loss_dtc_long(g, restored, clip, objective.long_gap, eps)?)
    } else {
        None
    };
    let lc = if wanted(w.rpc) && clip.len() >= 2 {
        Some(loss_rpc(g, phi, restored, &target, eps)?)
    } else {
        None
    };
    for (v, k) in [
        (lp, w.perceptual),
        (ld, w.dtc),
        (ll, w.dtc_long),
        (lc, w.rpc),
    ] {
        if let (Some(v), true) = (v, k > 0.0) {
            parts.push((v, k));
        }
    }
    let total = g.weighted_sum(&parts)?;
    let breakdown = total_loss(
        g.value(lr).item(),
        value(g, lp),
        value(g, ld),
        value(g, ll),
        value(g, lc),
        w,
    )?;
    if !g.value(total).is_finite() {
        return Err(Error::Numeric("clip objective is not finite".into()));
    }
    Ok((total, breakdown))
}

//! Global-to-local feature alignment: an exhaustive integer translation
//! search at quarter resolution, followed by coarse-to-fine learned offsets
//! and deformable sampling over a three-level pyramid.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::layers::{Conv, Init, LEAKY_SLOPE};
use crate::motion::{warp, FlowField};
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Pyramid depth; level 0 is full resolution, level 2 is quarter resolution.
pub const LEVELS: usize = 3;
/// Taps of the 3×3 deformable kernel; offsets carry two channels per tap.
pub const TAPS: usize = 9;
pub const OFFSET_CHANNELS: usize = 2 * TAPS;
pub const DEFAULT_F_MAX: i32 = 16;
/// Candidates whose overlap covers less than this fraction are skipped.
pub const MIN_OVERLAP: f64 = 0.25;

/// Integer translation at quarter resolution. Warping the target by it
/// lines it up with the reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct GlobalShift {
    pub u: i32,
    pub v: i32,
}

impl GlobalShift {
    pub const ZERO: GlobalShift = GlobalShift { u: 0, v: 0 };

    pub fn new(u: i32, v: i32) -> Self {
        Self { u, v }
    }

    pub fn is_zero(self) -> bool {
        self.u == 0 && self.v == 0
    }

    pub fn neg(self) -> Self {
        Self {
            u: -self.u,
            v: -self.v,
        }
    }

    /// Displacement in pixels at pyramid `level`.
    pub fn at_level(self, level: usize) -> (f64, f64) {
        let k = (1usize << (LEVELS - 1 - level)) as f64;
        (k * self.u as f64, k * self.v as f64)
    }

    pub fn flow_at_level(self, level: usize, h: usize, w: usize) -> FlowField {
        let (u, v) = self.at_level(level);
        FlowField::constant(h, w, u, v)
    }
}

/// Exhaustive search over `(u, v) ∈ [-f_max, f_max]²` minimising the mean
/// absolute difference between the shifted target and the reference over
/// their overlap. Ties go to the smaller shift, then to the lexicographically
/// smaller `(u, v)`.
pub fn global_align(reference: &Tensor, target: &Tensor, f_max: i32) -> Result<GlobalShift> {
    if reference.shape() != target.shape() {
        return Err(shape_err!(
            "global search of {:?} against {:?}",
            target.shape(),
            reference.shape()
        ));
    }
    if f_max < 0 {
        return Err(Error::Param(format!(
            "search radius must be non-negative, got {f_max}"
        )));
    }
    let (c, h, w) = (
        reference.channels(),
        reference.height() as i32,
        reference.width() as i32,
    );
    let total = (h * w) as f64;
    let mut best: Option<(f64, i64, GlobalShift)> = None;
    for u in -f_max..=f_max {
        for v in -f_max..=f_max {
            let (x0, x1) = ((-u).max(0), (w - u).min(w));
            let (y0, y1) = ((-v).max(0), (h - v).min(h));
            if x1 <= x0 || y1 <= y0 {
                continue;
            }
            let overlap = ((x1 - x0) * (y1 - y0)) as f64;
            if overlap < MIN_OVERLAP * total {
                continue;
            }
            let mut sum = 0.0;
            for ch in 0..c {
                let (r, t) = (reference.channel(ch), target.channel(ch));
                for y in y0..y1 {
                    let rr = &r[(y * w + x0) as usize..(y * w + x1) as usize];
                    let tr = &t[((y + v) * w + x0 + u) as usize..((y + v) * w + x1 + u) as usize];
                    sum += rr
                        .iter()
                        .zip(tr)
                        .map(|(a, b)| libm::fabs(b - a))
                        .sum::<f64>();
                }
            }
            let cost = sum / (overlap * c.max(1) as f64);
            let norm = (u as i64) * (u as i64) + (v as i64) * (v as i64);
            let cand = (cost, norm, GlobalShift { u, v });
            let better = match &best {
                None => true,
                Some((bc, bn, bs)) => {
                    cost < *bc
                        || (cost == *bc && (norm < *bn || (norm == *bn && (u, v) < (bs.u, bs.v))))
                }
            };
            if better {
                best = Some(cand);
            }
        }
    }
    best.map(|b| b.2).ok_or_else(|| {
        Error::Align(format!(
            "no shift within ±{f_max} keeps {MIN_OVERLAP} overlap"
        ))
    })
}

/// Feature pyramid with levels at full, half and quarter resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [Tensor; LEVELS],
}

impl FeaturePyramid {
    /// Levels by repeated 2×2 mean pooling.
    pub fn build(full: Tensor) -> Result<Self> {
        let half = crate::kernels::avg_pool2(&full)?;
        let quarter = crate::kernels::avg_pool2(&half)?;
        Ok(Self {
            levels: [full, half, quarter],
        })
    }
}

/// Shift every level by the global motion rescaled to that level.
pub fn apply_global(pyr: &FeaturePyramid, shift: GlobalShift) -> Result<FeaturePyramid> {
    let mut levels = pyr.levels.clone();
    for (i, level) in levels.iter_mut().enumerate() {
        let flow = shift.flow_at_level(i, level.height(), level.width());
        *level = warp(level, &flow)?.0;
    }
    Ok(FeaturePyramid { levels })
}

/// Pyramid of graph nodes built by 2×2 mean pooling.
pub fn build_pyramid(g: &mut Graph, full: Var) -> Result<[Var; LEVELS]> {
    let half = g.avg_pool2(full)?;
    let quarter = g.avg_pool2(half)?;
    Ok([full, half, quarter])
}

/// Deformable 3×3 convolution evaluated outside any training graph.
pub fn deform_conv(
    x: &Tensor,
    offsets: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, ov, wv) = (
        g.constant(x.clone()),
        g.constant(offsets.clone()),
        g.constant(weight.clone()),
    );
    let bv = bias.map(|b| g.constant(b.clone()));
    let out = g.deform_conv3(xv, ov, wv, bv)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
struct Level {
    /// g₂: features of the concatenated reference and target.
    offset_features: Conv,
    /// g₁: offsets from those features and the upsampled coarser offsets.
    offset_head: Conv,
    deform_weight: ParamId,
    deform_bias: ParamId,
    /// g: fuses the deformed target with the upsampled coarser result.
    fuse: Conv,
}

/// Learned part of the alignment module, shared by every buffer slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Glam {
    levels: Vec<Level>,
    pub channels: usize,
    pub f_max: i32,
}

impl Glam {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, channels: usize, f_max: i32) -> Self {
        let c = channels;
        let levels = (0..LEVELS)
            .map(|i| {
                let coarsest = i == LEVELS - 1;
                let name = format!("glam.l{i}");
                let head_in = if coarsest { c } else { c + OFFSET_CHANNELS };
                let fuse_in = if coarsest { c } else { 2 * c };
                let offset_features = Conv::new(
                    store,
                    &format!("{name}.offset_feat"),
                    rng,
                    2 * c,
                    c,
                    3,
                    1,
                    Init::Kaiming,
                );
                let offset_head = Conv::new(
                    store,
                    &format!("{name}.offset_head"),
                    rng,
                    head_in,
                    OFFSET_CHANNELS,
                    3,
                    1,
                    Init::Zero,
                );
                let w =
                    Tensor::from_fn(
                        c,
                        c,
                        TAPS,
                        |o, i, t| if o == i && t == TAPS / 2 { 1.0 } else { 0.0 },
                    );
                let deform_weight = store.add(format!("{name}.deform.weight"), w);
                let deform_bias = store.add(format!("{name}.deform.bias"), Tensor::zeros(c, 1, 1));
                let fuse = Conv::new(
                    store,
                    &format!("{name}.fuse"),
                    rng,
                    fuse_in,
                    c,
                    3,
                    1,
                    Init::Kaiming,
                )
                .with_padding(Padding::Replicate);
                Level {
                    offset_features,
                    offset_head,
                    deform_weight,
                    deform_bias,
                    fuse,
                }
            })
            .collect();
        Self {
            levels,
            channels,
            f_max,
        }
    }

    /// Randomise the zero-initialised offset heads, e.g. to move gradient
    /// checks away from integer sampling positions.
    pub fn perturb_offset_heads(&self, store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
        for l in &self.levels {
            let w = store.get(l.offset_head.weight);
            let (co, ci, taps) = (w.channels(), w.height(), w.width());
            *store.get_mut(l.offset_head.weight) =
                kaiming_uniform(rng, co, ci, taps, LEAKY_SLOPE).scale(scale);
            for b in store.get_mut(l.offset_head.bias).data_mut() {
                *b = scale * rng.random_range(-1.0..1.0);
            }
        }
    }

    /// Offsets at `level` from the globally aligned reference and target,
    /// refining the coarser level's offsets when given.
    pub fn estimate_offsets(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        level: usize,
        reference: Var,
        target: Var,
        coarser: Option<Var>,
    ) -> Result<Var> {
        let l = self.level(level)?;
        if g.shape(reference).c != self.channels || g.shape(target).c != self.channels {
            return Err(shape_err!(
                "alignment expects {} channels, got {} and {}",
                self.channels,
                g.shape(reference).c,
                g.shape(target).c
            ));
        }
        let pair = g.concat(&[reference, target])?;
        let feat = l.offset_features.forward(g, store, pair)?;
        let z = match coarser {
            Some(off) => {
                let up = g.upsample2(off);
                let up = g.scale(up, 2.0);
                g.concat(&[feat, up])?
            }
            None => feat,
        };
        let z = g.leaky_relu(z, LEAKY_SLOPE);
        l.offset_head.forward(g, store, z)
    }

    /// Deformable sampling of `target` at `offsets`, fused with the upsampled
    /// coarser aligned feature when given.
    pub fn deform_sample(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        level: usize,
        target: Var,
        offsets: Var,
        coarser_aligned: Option<Var>,
    ) -> Result<Var> {
        let l = self.level(level)?;
        let w = g.param(store, l.deform_weight);
        let b = g.param(store, l.deform_bias);
        let d = g.deform_conv3(target, offsets, w, Some(b))?;
        let x = match coarser_aligned {
            Some(a) => {
                let up = g.upsample2(a);
                g.concat(&[d, up])?
            }
            None => d,
        };
        l.fuse.forward_act(g, store, x)
    }

    fn level(&self, level: usize) -> Result<&Level> {
        self.levels
            .get(level)
            .ok_or_else(|| Error::Param(format!("pyramid level {level} out of range")))
    }

    /// Align the target pyramid to the reference pyramid and return the
    /// full-resolution aligned target together with the global shift used.
    pub fn align(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        reference: &[Var; LEVELS],
        target: &[Var; LEVELS],
    ) -> Result<(Var, GlobalShift)> {
        let shift = global_align(
            g.value(reference[LEVELS - 1]),
            g.value(target[LEVELS - 1]),
            self.f_max,
        )?;
        let mut shifted = *target;
        if !shift.is_zero() {
            for (i, t) in shifted.iter_mut().enumerate() {
                let s = g.shape(*t);
                let flow = g.constant(shift.flow_at_level(i, s.h, s.w).into_tensor());
                *t = g.warp(*t, flow)?;
            }
        }
        let mut offsets = None;
        let mut aligned = None;
        for i in (0..LEVELS).rev() {
            let off = self.estimate_offsets(g, store, i, reference[i], shifted[i], offsets)?;
            let a = self.deform_sample(g, store, i, shifted[i], off, aligned)?;
            offsets = Some(off);
            aligned = Some(a);
        }
        Ok((aligned.expect("at least one level"), shift))
    }
}

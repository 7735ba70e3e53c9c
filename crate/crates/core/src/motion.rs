//! Dense flow fields, the backward warp, flow composition, and synthesis of
//! moving raw clips with exactly known motion.
//!
//! Convention: warping `I` by flow `f` reads `I` at `(x + u, y + v)`, so `f`
//! maps the grid of the warped result into the source frame.

use alloc::vec::Vec;

use rand::Rng;

use crate::degrade::{degrade_frame, BayerPattern, NoiseParams, RawFrame};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, BilinearTap};
use crate::tensor::{Shape, Tensor};

/// `(2, H, W)` displacement in pixels: channel 0 horizontal (u), channel 1 vertical (v).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Tensor::zeros(2, h, w))
    }

    pub fn constant(h: usize, w: usize, u: f64, v: f64) -> Self {
        Self(Tensor::from_fn(
            2,
            h,
            w,
            |c, _, _| if c == 0 { u } else { v },
        ))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.channels() != 2 {
            return Err(shape_err!("flow needs 2 channels, got {}", t.channels()));
        }
        if !t.is_finite() {
            return Err(Error::Numeric("flow contains non-finite values".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        (self.0.at(0, y, x), self.0.at(1, y, x))
    }

    pub fn max_magnitude(&self) -> f64 {
        let plane = self.0.shape().plane();
        (0..plane)
            .map(|p| libm::hypot(self.0.data()[p], self.0.data()[plane + p]))
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, k: f64) -> FlowField {
        FlowField(self.0.scale(k))
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<FlowField> {
        Ok(FlowField(self.0.crop(y0, x0, h, w)?))
    }

    /// Mask of grid points whose read position `p + f(p)` lies inside the frame.
    pub fn in_bounds_mask(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        Tensor::from_fn(1, h, w, |_, y, x| {
            let (u, v) = self.at(y, x);
            if kernels::in_bounds(h, w, y as f64 + v, x as f64 + u) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Bilinear backward warp with replicate borders. The mask is 0 exactly where
/// the read position falls outside the source frame. Zero flow returns the
/// input bit-for-bit.
pub fn warp(image: &Tensor, flow: &FlowField) -> Result<(Tensor, Tensor)> {
    kernels::warp_values(image, flow.tensor())
}

/// Flow equivalent to warping by `first` and then by `second`:
/// `out(p) = second(p) + first(p + second(p))`, read bilinearly.
pub fn compose_flows(first: &FlowField, second: &FlowField) -> Result<FlowField> {
    Ok(compose_with_masks(first, None, second)?.0)
}

/// [`compose_flows`] plus the validity of the composed warp. `first_mask` is
/// the validity of `first` on its own grid (defaults to its in-bounds mask).
/// A point is valid when `second` reads in bounds and every bilinear tap of
/// `first_mask` it touches is valid.
pub fn compose_with_masks(
    first: &FlowField,
    first_mask: Option<&Tensor>,
    second: &FlowField,
) -> Result<(FlowField, Tensor)> {
    let (h, w) = (second.height(), second.width());
    if first.tensor().shape() != second.tensor().shape() {
        return Err(shape_err!(
            "compose of flows {:?} and {:?}",
            first.tensor().shape(),
            second.tensor().shape()
        ));
    }
    let own_mask;
    let fmask = match first_mask {
        Some(m) => {
            m.expect_shape(Shape::new(1, h, w))?;
            m
        }
        None => {
            own_mask = first.in_bounds_mask();
            &own_mask
        }
    };
    let plane = h * w;
    let mut out = Tensor::zeros(2, h, w);
    let mut mask = Tensor::zeros(1, h, w);
    let (fu, fv) = (first.tensor().channel(0), first.tensor().channel(1));
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (su, sv) = second.at(y, x);
            let (py, px) = (y as f64 + sv, x as f64 + su);
            let tap = BilinearTap::new(h, w, py, px);
            out.data_mut()[p] = su + tap.sample(fu);
            out.data_mut()[plane + p] = sv + tap.sample(fv);
            if kernels::in_bounds(h, w, py, px) && tap.sample(fmask.data()) == 1.0 {
                mask.data_mut()[p] = 1.0;
            }
        }
    }
    Ok((FlowField(out), mask))
}

/// Bounds of the random per-step affine motion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSynthParams {
    /// Translation drawn uniformly from `[-max, max]` px per axis.
    pub max_translation: f64,
    /// Rotation drawn uniformly from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    /// Scale drawn uniformly from `[1 - max, 1 + max]`.
    pub max_scale_delta: f64,
}

impl Default for FlowSynthParams {
    fn default() -> Self {
        Self {
            max_translation: 8.0,
            max_rotation_deg: 2.0,
            max_scale_delta: 0.02,
        }
    }
}

impl FlowSynthParams {
    pub const STILL: FlowSynthParams = FlowSynthParams {
        max_translation: 0.0,
        max_rotation_deg: 0.0,
        max_scale_delta: 0.0,
    };
}

/// Dense flow of the affine map `p ↦ c + s·R(θ)(p − c) + t` about the frame
/// centre `c`, expressed as a displacement.
pub fn affine_flow(
    h: usize,
    w: usize,
    tx: f64,
    ty: f64,
    rotation_rad: f64,
    scale: f64,
) -> FlowField {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = (libm::sin(rotation_rad), libm::cos(rotation_rad));
    let (a, b) = (scale * c, scale * s);
    FlowField(Tensor::from_fn(2, h, w, |ch, y, x| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        if ch == 0 {
            (a - 1.0) * dx - b * dy + tx
        } else {
            b * dx + (a - 1.0) * dy + ty
        }
    }))
}

fn symmetric(rng: &mut impl Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

pub fn sample_step_flow(
    h: usize,
    w: usize,
    rng: &mut impl Rng,
    params: &FlowSynthParams,
) -> FlowField {
    let tx = symmetric(rng, params.max_translation);
    let ty = symmetric(rng, params.max_translation);
    let rot = symmetric(rng, params.max_rotation_deg).to_radians();
    let scale = 1.0 + symmetric(rng, params.max_scale_delta);
    affine_flow(h, w, tx, ty, rot, scale)
}

/// A raw clip rendered from one clean frame moved by known flows.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    /// Clean frames `x_t = warp(x, f_{0→t})`.
    pub clean: Vec<Tensor>,
    /// Degraded frames `y_t`.
    pub raw: Vec<RawFrame>,
    /// `f_{t→t+1}` for `t = 0..N-1`.
    pub step_flows: Vec<FlowField>,
    /// `f_{0→t}` for `t = 0..N`; the first is zero.
    pub composed_flows: Vec<FlowField>,
    /// Validity of each clean frame: 1 where it shows real source content.
    pub frame_masks: Vec<Tensor>,
}

impl SyntheticClip {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    /// Flow `f_{t→t+gap}` and the mask of pixels of frame `t + gap` where
    /// warping frame `t` by it compares real content to real content.
    pub fn pair(&self, t: usize, gap: usize) -> Result<(FlowField, Tensor)> {
        if gap == 0 || t + gap >= self.len() || self.step_flows.len() + 1 != self.len() {
            return Err(Error::Contract(alloc::format!(
                "no flow from frame {t} to {} in a clip of {} frames with {} step flows",
                t + gap,
                self.len(),
                self.step_flows.len()
            )));
        }
        let mut flow = self.step_flows[t].clone();
        let mut mask = flow.in_bounds_mask();
        for s in t + 1..t + gap {
            let (f, m) = compose_with_masks(&flow, Some(&mask), &self.step_flows[s])?;
            flow = f;
            mask = m;
        }
        let source_mask = &self.frame_masks[t];
        let target_mask = &self.frame_masks[t + gap];
        let (h, w) = (flow.height(), flow.width());
        for y in 0..h {
            for x in 0..w {
                if mask.at(0, y, x) == 0.0 {
                    continue;
                }
                let (u, v) = flow.at(y, x);
                let read =
                    BilinearTap::new(h, w, y as f64 + v, x as f64 + u).sample(source_mask.data());
                if target_mask.at(0, y, x) != 1.0 || read != 1.0 {
                    mask.set(0, y, x, 0.0);
                }
            }
        }
        Ok((flow, mask))
    }

    /// Spatial crop of every stored field. The origin must be even to keep
    /// the Bayer phase. Flows keep their displacements.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<SyntheticClip> {
        if y0 % 2 != 0 || x0 % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("Bayer crops need even origin and size"));
        }
        let raw = self
            .raw
            .iter()
            .map(|r| RawFrame::new(r.cfa.crop(y0, x0, h, w)?, r.pattern, r.noise))
            .collect::<Result<Vec<_>>>()?;
        Ok(SyntheticClip {
            clean: self
                .clean
                .iter()
                .map(|t| t.crop(y0, x0, h, w))
                .collect::<Result<_>>()?,
            raw,
            step_flows: self
                .step_flows
                .iter()
                .map(|f| f.crop(y0, x0, h, w))
                .collect::<Result<_>>()?,
            composed_flows: self
                .composed_flows
                .iter()
                .map(|f| f.crop(y0, x0, h, w))
                .collect::<Result<_>>()?,
            frame_masks: self
                .frame_masks
                .iter()
                .map(|m| m.crop(y0, x0, h, w))
                .collect::<Result<_>>()?,
        })
    }
}

/// Render `frames` views of `x` under a random walk of affine steps and
/// degrade each one.
pub fn synth_clip(
    x: &Tensor,
    frames: usize,
    noise: NoiseParams,
    motion: &FlowSynthParams,
    pattern: BayerPattern,
    rng: &mut impl Rng,
) -> Result<SyntheticClip> {
    if frames < 2 {
        return Err(Error::Contract(alloc::format!(
            "synthetic clips need at least 2 frames, got {frames}"
        )));
    }
    let (h, w) = (x.height(), x.width());
    let mut step_flows = Vec::with_capacity(frames - 1);
    let mut composed_flows = Vec::with_capacity(frames);
    let mut frame_masks = Vec::with_capacity(frames);
    composed_flows.push(FlowField::zeros(h, w));
    frame_masks.push(Tensor::full(1, h, w, 1.0));
    for t in 0..frames - 1 {
        let step = sample_step_flow(h, w, rng, motion);
        let (composed, mask) =
            compose_with_masks(&composed_flows[t], Some(&frame_masks[t]), &step)?;
        step_flows.push(step);
        composed_flows.push(composed);
        frame_masks.push(mask);
    }
    let mut clean = Vec::with_capacity(frames);
    let mut raw = Vec::with_capacity(frames);
    for f in &composed_flows {
        let (frame, _) = warp(x, f)?;
        raw.push(degrade_frame(&frame, noise, pattern, rng)?);
        clean.push(frame);
    }
    Ok(SyntheticClip {
        clean,
        raw,
        step_flows,
        composed_flows,
        frame_masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::scene;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(c, h, w, |ch, y, x| {
            0.1 * ch as f64 + 0.03 * y as f64 - 0.02 * x as f64
        })
    }

    #[test]
    fn zero_flow_warp_is_bit_identical() {
        let mut rng = stream(2, "img");
        let img = Tensor::from_fn(3, 6, 5, |_, _, _| rng.random::<f64>() - 0.5);
        let (out, mask) = warp(&img, &FlowField::zeros(6, 5)).unwrap();
        assert!(out
            .data()
            .iter()
            .zip(img.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn integer_shift_copies_columns() {
        let img = Tensor::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f64);
        let (out, mask) = warp(&img, &FlowField::constant(4, 4, 1.0, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..3 {
                assert_eq!(out.at(0, y, x), img.at(0, y, x + 1));
                assert_eq!(mask.at(0, y, x), 1.0);
            }
            assert_eq!(mask.at(0, y, 3), 0.0);
            assert_eq!(out.at(0, y, 3), img.at(0, y, 3));
        }
    }

    #[test]
    fn half_pixel_flow_on_ramp_is_exact() {
        let mut rng = stream(4, "flow");
        let img = ramp(2, 8, 8);
        let flow = FlowField::from_tensor(Tensor::from_fn(2, 8, 8, |_, _, _| {
            0.5 * rng.random_range(-2i32..=2) as f64
        }))
        .unwrap();
        let (out, mask) = warp(&img, &flow).unwrap();
        for c in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    if mask.at(0, y, x) == 1.0 {
                        let (u, v) = flow.at(y, x);
                        let want = 0.1 * c as f64 + 0.03 * (y as f64 + v) - 0.02 * (x as f64 + u);
                        assert!((out.at(c, y, x) - want).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn warp_rejects_mismatched_flow() {
        assert!(warp(&Tensor::zeros(3, 4, 4), &FlowField::zeros(4, 5)).is_err());
    }

    #[test]
    fn constant_flows_compose_by_addition() {
        let z = compose_flows(&FlowField::zeros(5, 5), &FlowField::zeros(5, 5)).unwrap();
        assert_eq!(z, FlowField::zeros(5, 5));
        let c = compose_flows(
            &FlowField::constant(6, 7, 1.0, 2.0),
            &FlowField::constant(6, 7, 3.0, -1.0),
        )
        .unwrap();
        assert_eq!(c, FlowField::constant(6, 7, 4.0, 1.0));
    }

    #[test]
    fn single_warp_matches_sequential_warp() {
        let img = scene::smooth_texture(3, 48, 48, &mut stream(9, "scene"));
        let a = affine_flow(48, 48, 1.3, -0.7, 0.01, 1.005);
        let b = affine_flow(48, 48, -0.4, 0.9, -0.015, 0.997);
        let (once, mask) = warp(&img, &compose_flows(&a, &b).unwrap()).unwrap();
        let (twice, _) = warp(&warp(&img, &a).unwrap().0, &b).unwrap();
        let (mut err, mut n) = (0.0, 0);
        for c in 0..3 {
            for y in 4..44 {
                for x in 4..44 {
                    if mask.at(0, y, x) == 1.0 {
                        err += (once.at(c, y, x) - twice.at(c, y, x)).abs();
                        n += 1;
                    }
                }
            }
        }
        assert!(err / (n as f64) < 1e-3, "MAE {}", err / n as f64);
    }

    #[test]
    fn composed_mask_is_subset_of_step_masks() {
        let mut rng = stream(5, "m");
        let a = sample_step_flow(20, 24, &mut rng, &FlowSynthParams::default());
        let b = sample_step_flow(20, 24, &mut rng, &FlowSynthParams::default());
        let (_, m) = compose_with_masks(&a, None, &b).unwrap();
        let mb = b.in_bounds_mask();
        assert!(m.data().iter().zip(mb.data()).all(|(&c, &s)| c <= s));
    }

    #[test]
    fn degenerate_and_translation_params() {
        let mut rng = stream(1, "s");
        let f = sample_step_flow(8, 10, &mut rng, &FlowSynthParams::STILL);
        assert_eq!(f, FlowField::zeros(8, 10));
        let t = affine_flow(8, 10, 3.0, -2.0, 0.0, 1.0);
        assert!(t.tensor().channel(0).iter().all(|&u| u == 3.0));
        assert!(t.tensor().channel(1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn rotation_field_is_linear_in_radius() {
        let (h, w) = (33, 33);
        let theta = 2.0f64.to_radians();
        let f = affine_flow(h, w, 0.0, 0.0, theta, 1.0);
        assert!(f.at(16, 16).0.abs() < 1e-15 && f.at(16, 16).1.abs() < 1e-15);
        // |R(θ)d − d| = 2 sin(θ/2) |d|
        let k = 2.0 * libm::sin(theta / 2.0);
        for (y, x) in [(16, 26), (0, 0), (5, 30), (32, 16)] {
            let r = libm::hypot(x as f64 - 16.0, y as f64 - 16.0);
            let (u, v) = f.at(y, x);
            assert!((libm::hypot(u, v) - k * r).abs() < 1e-12);
        }
    }

    #[test]
    fn synth_clip_contract() {
        let mut rng = stream(3, "clip");
        let x = scene::smooth_texture(3, 32, 32, &mut rng);
        assert!(synth_clip(
            &x,
            1,
            NoiseParams::NONE,
            &FlowSynthParams::default(),
            BayerPattern::Rggb,
            &mut rng
        )
        .is_err());
        let clip = synth_clip(
            &x,
            4,
            NoiseParams::NONE,
            &FlowSynthParams::default(),
            BayerPattern::Rggb,
            &mut rng,
        )
        .unwrap();
        assert_eq!(clip.len(), 4);
        assert_eq!(clip.clean[0], x);
        for (c, r) in clip.clean.iter().zip(&clip.raw) {
            assert_eq!(
                r.cfa,
                crate::degrade::mosaic(c, BayerPattern::Rggb).unwrap()
            );
        }
        for t in 0..3 {
            let want = compose_flows(&clip.composed_flows[t], &clip.step_flows[t]).unwrap();
            assert_eq!(want, clip.composed_flows[t + 1]);
        }
    }

    #[test]
    fn stored_step_flows_reproduce_next_frame() {
        let mut rng = stream(8, "consistency");
        let x = scene::smooth_texture(3, 64, 64, &mut rng);
        let params = FlowSynthParams {
            max_translation: 4.0,
            ..FlowSynthParams::default()
        };
        let clip = synth_clip(
            &x,
            5,
            NoiseParams::LOW,
            &params,
            BayerPattern::Rggb,
            &mut rng,
        )
        .unwrap();
        for t in 0..4 {
            let (flow, mask) = clip.pair(t, 1).unwrap();
            let (warped, _) = warp(&clip.clean[t], &flow).unwrap();
            let mae = masked_mae(&warped, &clip.clean[t + 1], &mask);
            assert!(mae <= 2e-3, "pair {t}: MAE {mae}");
        }
        let (flow, mask) = clip.pair(0, 4).unwrap();
        let (warped, _) = warp(&clip.clean[0], &flow).unwrap();
        assert!(masked_mae(&warped, &clip.clean[4], &mask) <= 2e-3);
    }

    fn masked_mae(a: &Tensor, b: &Tensor, mask: &Tensor) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for c in 0..a.channels() {
            for (p, &m) in mask.data().iter().enumerate() {
                if m == 1.0 {
                    s += (a.channel(c)[p] - b.channel(c)[p]).abs();
                    n += 1;
                }
            }
        }
        s / n.max(1) as f64
    }

    proptest! {
        #[test]
        fn warp_is_linear_in_image(k in -2.0f64..2.0, seed in 0u64..1000) {
            let mut rng = stream(seed, "lin");
            let a = Tensor::from_fn(2, 6, 6, |_, _, _| rng.random::<f64>());
            let b = Tensor::from_fn(2, 6, 6, |_, _, _| rng.random::<f64>());
            let flow = FlowField::from_tensor(Tensor::from_fn(2, 6, 6, |_, _, _| rng.random_range(-3.0..3.0))).unwrap();
            let combo = a.zip_map(&b, |p, q| k * p + q).unwrap();
            let lhs = warp(&combo, &flow).unwrap().0;
            let wa = warp(&a, &flow).unwrap().0;
            let wb = warp(&b, &flow).unwrap().0;
            for ((l, p), q) in lhs.data().iter().zip(wa.data()).zip(wb.data()) {
                prop_assert!((l - (k * p + q)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pair_rejects_out_of_range() {
        let clip = SyntheticClip {
            clean: vec![Tensor::zeros(3, 4, 4); 2],
            raw: vec![],
            step_flows: vec![FlowField::zeros(4, 4)],
            composed_flows: vec![FlowField::zeros(4, 4); 2],
            frame_masks: vec![Tensor::full(1, 4, 4, 1.0); 2],
        };
        assert!(clip.pair(0, 1).is_ok());
        assert!(matches!(clip.pair(0, 2), Err(Error::Contract(_))));
    }
}

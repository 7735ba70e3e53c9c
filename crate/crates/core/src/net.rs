//! The restoration network: shallow feature extraction from packed raw
//! frames and noise maps, a sliding buffer of aligned neighbour features, a
//! recurrent hidden state, and a five-scale attention UNet.
//!
//! Every frame's features are computed once and then reused while the frame
//! stays inside the buffer.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::degrade::{noise_map, pack_cfa, RawFrame};
use crate::error::{shape_err, Error, Result};
use crate::glam::{build_pyramid, global_align, Glam, DEFAULT_F_MAX, LEVELS};
use crate::graph::{Graph, Var};
use crate::layers::{Conv, ConvTranspose, Init, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Number of UNet scales; packed frames must divide by `2^(SCALES-1)`.
pub const SCALES: usize = 5;
pub const SIZE_MULTIPLE: usize = 1 << (SCALES - 1);

/// What the reconstruction module receives in place of the previous
/// reconstruction feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HiddenMode {
    /// `H_{t-1}`, zeros before the first frame.
    #[default]
    Recurrent,
    /// Always zeros.
    Zero,
    /// The previous frame's shallow feature `I_{t-1}`.
    Shallow,
}

impl HiddenMode {
    pub fn name(self) -> &'static str {
        match self {
            HiddenMode::Recurrent => "recurrent",
            HiddenMode::Zero => "zero",
            HiddenMode::Shallow => "shallow",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "recurrent" => Some(HiddenMode::Recurrent),
            "zero" => Some(HiddenMode::Zero),
            "shallow" => Some(HiddenMode::Shallow),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    /// Shallow feature width C.
    pub feat_channels: usize,
    /// Hidden state width C_h.
    pub hidden_channels: usize,
    /// Cap on UNet channel doubling.
    pub max_channels: usize,
    /// Buffer size n (odd).
    pub buffer: usize,
    /// Global search radius at quarter resolution.
    pub f_max: i32,
    pub hidden_mode: HiddenMode,
    /// Shift `H_{t-1}` by the global motion between frames before use.
    pub align_hidden: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            feat_channels: 32,
            hidden_channels: 64,
            max_channels: 256,
            buffer: 5,
            f_max: DEFAULT_F_MAX,
            hidden_mode: HiddenMode::Recurrent,
            align_hidden: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buffer == 0 || self.buffer % 2 == 0 {
            return Err(Error::Param(format!(
                "buffer size must be odd and positive, got {}",
                self.buffer
            )));
        }
        if self.feat_channels == 0
            || self.hidden_channels == 0
            || self.max_channels < self.hidden_channels
        {
            return Err(Error::Param(
                "channel widths must be positive and the cap at least C_h".into(),
            ));
        }
        if self.f_max < 0 {
            return Err(Error::Param(format!(
                "f_max must be non-negative, got {}",
                self.f_max
            )));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.buffer / 2
    }

    fn prev_channels(&self) -> usize {
        match self.hidden_mode {
            HiddenMode::Shallow => self.feat_channels,
            _ => self.hidden_channels,
        }
    }

    fn width(&self, scale: usize) -> usize {
        (self.hidden_channels << scale).min(self.max_channels)
    }
}

/// Fixed-length window of shared frame features centred on the current frame.
#[derive(Clone, Debug)]
pub struct FrameBuffer<T> {
    slots: VecDeque<Arc<T>>,
}

impl<T> FrameBuffer<T> {
    /// Window for the first frame of a clip: slots before the clip start
    /// replicate the first frame. `features[i]` is frame `i`; at least
    /// `min(n/2 + 1, clip length)` of them must be present.
    pub fn start(n: usize, features: &[Arc<T>]) -> Result<Self> {
        if n % 2 == 0 || features.is_empty() {
            return Err(Error::Param(format!(
                "buffer of {n} slots from {} features",
                features.len()
            )));
        }
        let r = n / 2;
        let slots = (0..n)
            .map(|k| {
                let idx = k.saturating_sub(r).min(features.len() - 1);
                features[idx].clone()
            })
            .collect();
        Ok(Self { slots })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Drop the oldest slot and append `next`.
    pub fn push(&mut self, next: Arc<T>) {
        self.slots.pop_front();
        self.slots.push_back(next);
    }

    pub fn center(&self) -> &Arc<T> {
        &self.slots[self.slots.len() / 2]
    }

    pub fn newest(&self) -> &Arc<T> {
        &self.slots[self.slots.len() - 1]
    }

    pub fn slots(&self) -> impl Iterator<Item = &Arc<T>> {
        self.slots.iter()
    }
}

/// Index of the frame that enters the buffer when moving to frame `t + 1`,
/// or `None` once the clip end is being replicated.
fn incoming(t: usize, radius: usize, len: usize) -> Option<usize> {
    let i = t + 1 + radius;
    (i < len).then_some(i)
}

#[derive(Clone, Debug, PartialEq)]
struct ChannelAttention {
    squeeze: Conv,
    excite: Conv,
}

#[derive(Clone, Debug, PartialEq)]
struct Rcm {
    entry: [Conv; 2],
    down: Vec<Conv>,
    enc: Vec<Conv>,
    cam: ChannelAttention,
    sam: Conv,
    up: Vec<ConvTranspose>,
    dec: Vec<Conv>,
}

/// Network structure; parameter values live in a [`ParamStore`].
#[derive(Debug)]
pub struct Network {
    pub config: NetConfig,
    extract: [Conv; 2],
    pub glam: Glam,
    rcm: Rcm,
    to_rgb: Conv,
    extractions: AtomicUsize,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            extract: self.extract,
            glam: self.glam.clone(),
            rcm: self.rcm.clone(),
            to_rgb: self.to_rgb,
            extractions: AtomicUsize::new(self.extraction_count()),
        }
    }
}

/// Outputs of one restoration step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// Restored linear RGB frame at full resolution.
    pub rgb: Var,
    /// Reconstruction feature `H_t`.
    pub hidden: Var,
}

impl Network {
    /// Register all parameters in `store` in a fixed order.
    pub fn new(config: NetConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (c, ch) = (config.feat_channels, config.hidden_channels);
        let extract = [
            Conv::new(store, "extract.0", rng, 8, c, 3, 1, Init::Kaiming),
            Conv::new(store, "extract.1", rng, c, c, 3, 1, Init::Kaiming),
        ];
        let glam = Glam::new(store, rng, c, config.f_max);
        let rcm_in = config.buffer * c + config.prev_channels();
        let entry = [
            Conv::new(store, "rcm.entry.0", rng, rcm_in, ch, 3, 1, Init::Kaiming),
            Conv::new(store, "rcm.entry.1", rng, ch, ch, 3, 1, Init::Kaiming),
        ];
        let mut down = Vec::new();
        let mut enc = Vec::new();
        for s in 1..SCALES {
            let (a, b) = (config.width(s - 1), config.width(s));
            down.push(Conv::new(
                store,
                &format!("rcm.down.{s}"),
                rng,
                a,
                b,
                3,
                2,
                Init::Kaiming,
            ));
            enc.push(Conv::new(
                store,
                &format!("rcm.enc.{s}"),
                rng,
                b,
                b,
                3,
                1,
                Init::Kaiming,
            ));
        }
        let bw = config.width(SCALES - 1);
        let squeeze_w = (bw / 4).max(1);
        let cam = ChannelAttention {
            squeeze: Conv::new(
                store,
                "rcm.cam.squeeze",
                rng,
                bw,
                squeeze_w,
                1,
                1,
                Init::Kaiming,
            ),
            excite: Conv::new(
                store,
                "rcm.cam.excite",
                rng,
                squeeze_w,
                bw,
                1,
                1,
                Init::Kaiming,
            ),
        };
        let sam = Conv::new(store, "rcm.sam", rng, 2, 1, 3, 1, Init::Kaiming);
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for s in (0..SCALES - 1).rev() {
            let (a, b) = (config.width(s + 1), config.width(s));
            up.push(ConvTranspose::new(store, &format!("rcm.up.{s}"), rng, a, b));
            dec.push(Conv::new(
                store,
                &format!("rcm.dec.{s}"),
                rng,
                2 * b,
                b,
                3,
                1,
                Init::Kaiming,
            ));
        }
        let to_rgb = Conv::new(store, "to_rgb", rng, ch, 12, 3, 1, Init::Kaiming);
        Ok(Self {
            config,
            extract,
            glam,
            rcm: Rcm {
                entry,
                down,
                enc,
                cam,
                sam,
                up,
                dec,
            },
            to_rgb,
            extractions: AtomicUsize::new(0),
        })
    }

    /// How many times [`extract_features`](Self::extract_features) has run.
    pub fn extraction_count(&self) -> usize {
        self.extractions.load(Ordering::Relaxed)
    }

    pub fn reset_extraction_count(&self) {
        self.extractions.store(0, Ordering::Relaxed);
    }

    /// Shallow features at packed resolution from a raw frame and its noise map.
    pub fn extract_features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        raw: &RawFrame,
        noise: &Tensor,
    ) -> Result<Var> {
        if noise.shape() != raw.cfa.shape() {
            return Err(shape_err!(
                "noise map {:?} for raw frame {:?}",
                noise.shape(),
                raw.cfa.shape()
            ));
        }
        self.extractions.fetch_add(1, Ordering::Relaxed);
        let packed = Tensor::concat(&[&pack_cfa(&raw.cfa)?, &pack_cfa(noise)?])?;
        let x = g.constant(packed);
        let x = self.extract[0].forward_act(g, store, x)?;
        self.extract[1].forward_act(g, store, x)
    }

    pub fn check_frame_size(&self, h: usize, w: usize) -> Result<()> {
        let m = 2 * SIZE_MULTIPLE;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(shape_err!(
                "raw frames must be a positive multiple of {m} on each side for {SCALES} scales, got {h}x{w}"
            ));
        }
        Ok(())
    }

    /// The reconstruction UNet. Returns `H_t`.
    pub fn rcm(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        aligned: &[Var],
        prev: Var,
    ) -> Result<Var> {
        if aligned.len() != self.config.buffer {
            return Err(shape_err!(
                "{} aligned features for a buffer of {}",
                aligned.len(),
                self.config.buffer
            ));
        }
        let s = g.shape(prev);
        if s.h % SIZE_MULTIPLE != 0 || s.w % SIZE_MULTIPLE != 0 || s.h == 0 || s.w == 0 {
            return Err(shape_err!(
                "packed size {}x{} is not divisible by {SIZE_MULTIPLE}",
                s.h,
                s.w
            ));
        }
        let mut parts = aligned.to_vec();
        parts.push(prev);
        let x = g.concat(&parts)?;
        let x = self.rcm.entry[0].forward_act(g, store, x)?;
        let mut x = self.rcm.entry[1].forward_act(g, store, x)?;
        let mut skips = Vec::with_capacity(SCALES - 1);
        for (down, enc) in self.rcm.down.iter().zip(&self.rcm.enc) {
            skips.push(x);
            let d = down.forward_act(g, store, x)?;
            x = enc.forward_act(g, store, d)?;
        }
        x = self.channel_attention(g, store, x)?;
        x = self.spatial_attention(g, store, x)?;
        for (up, dec) in self.rcm.up.iter().zip(&self.rcm.dec) {
            let u = up.forward(g, store, x)?;
            let u = g.leaky_relu(u, LEAKY_SLOPE);
            let skip = skips.pop().expect("one skip per scale");
            let cat = g.concat(&[u, skip])?;
            x = dec.forward_act(g, store, cat)?;
        }
        Ok(x)
    }

    fn channel_gates(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x);
        let z = self.rcm.cam.squeeze.forward_act(g, store, pooled)?;
        let z = self.rcm.cam.excite.forward(g, store, z)?;
        Ok(g.sigmoid(z))
    }

    fn channel_attention(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gates = self.channel_gates(g, store, x)?;
        g.mul(x, gates)
    }

    fn spatial_attention(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mx = g.channel_max(x);
        let mean = g.channel_mean(x);
        let pooled = g.concat(&[mx, mean])?;
        let z = self.rcm.sam.forward(g, store, pooled)?;
        let gate = g.sigmoid(z);
        g.mul(x, gate)
    }

    /// Channel gates of the attention block for a bottleneck input; exposed
    /// for inspection.
    pub fn attention_gates(&self, store: &ParamStore, bottleneck: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(bottleneck.clone());
        let gates = self.channel_gates(&mut g, store, x)?;
        Ok(g.value(gates).clone())
    }

    /// 3×3 convolution to 12 channels and a 2× depth-to-space shuffle.
    pub fn to_rgb(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        let x = self.to_rgb.forward(g, store, hidden)?;
        g.depth_to_space2(x)
    }

    /// Align every buffer slot to the centre, reconstruct, and map to RGB.
    pub fn restore_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        window: &[Var],
        prev: Var,
    ) -> Result<StepOutput> {
        if window.len() != self.config.buffer {
            return Err(shape_err!(
                "window of {} for a buffer of {}",
                window.len(),
                self.config.buffer
            ));
        }
        let center = window[window.len() / 2];
        let reference = build_pyramid(g, center)?;
        let mut aligned = Vec::with_capacity(window.len());
        let mut pyramids: Vec<(Var, [Var; LEVELS])> = Vec::new();
        for &slot in window {
            let pyr = match pyramids.iter().find(|(v, _)| *v == slot) {
                Some((_, p)) => *p,
                None => {
                    let p = if slot == center {
                        reference
                    } else {
                        build_pyramid(g, slot)?
                    };
                    pyramids.push((slot, p));
                    p
                }
            };
            aligned.push(self.glam.align(g, store, &reference, &pyr)?.0);
        }
        let hidden = self.rcm(g, store, &aligned, prev)?;
        let rgb = self.to_rgb(g, store, hidden)?;
        Ok(StepOutput { rgb, hidden })
    }

    fn zeros_prev(&self, h: usize, w: usize) -> Tensor {
        Tensor::zeros(self.config.prev_channels(), h, w)
    }

    /// Previous-state input for step `t` given the current centre feature.
    fn previous_input(
        &self,
        g: &mut Graph,
        center: Var,
        last_hidden: Option<Var>,
        last_center: Option<Var>,
    ) -> Result<Var> {
        let s = g.shape(center);
        match self.config.hidden_mode {
            HiddenMode::Zero => Ok(g.constant(self.zeros_prev(s.h, s.w))),
            HiddenMode::Shallow => match last_center {
                Some(v) => Ok(v),
                None => Ok(g.constant(self.zeros_prev(s.h, s.w))),
            },
            HiddenMode::Recurrent => {
                let (Some(h), Some(prev_center)) = (last_hidden, last_center) else {
                    return Ok(g.constant(self.zeros_prev(s.h, s.w)));
                };
                if !self.config.align_hidden {
                    return Ok(h);
                }
                let cur = build_pyramid(g, center)?;
                let old = build_pyramid(g, prev_center)?;
                let shift = global_align(
                    g.value(cur[LEVELS - 1]),
                    g.value(old[LEVELS - 1]),
                    self.config.f_max,
                )?;
                if shift.is_zero() {
                    return Ok(h);
                }
                let flow = g.constant(shift.flow_at_level(0, s.h, s.w).into_tensor());
                g.warp(h, flow)
            }
        }
    }

    /// Restore a whole clip inside one graph so losses can backpropagate
    /// through the recurrence. Features are extracted once per frame.
    pub fn run_clip_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        raws: &[RawFrame],
    ) -> Result<Vec<Var>> {
        let first = raws
            .first()
            .ok_or_else(|| Error::Contract("cannot restore an empty clip".into()))?;
        self.check_frame_size(first.height(), first.width())?;
        let r = self.config.radius();
        let mut feats: Vec<Arc<Var>> = Vec::with_capacity(raws.len());
        for raw in raws.iter().take(r + 1) {
            feats.push(Arc::new(self.extract_features(
                g,
                store,
                raw,
                &noise_map(raw),
            )?));
        }
        let mut buffer = FrameBuffer::start(self.config.buffer, &feats)?;
        let mut outputs = Vec::with_capacity(raws.len());
        let (mut last_hidden, mut last_center) = (None, None);
        for t in 0..raws.len() {
            let window: Vec<Var> = buffer.slots().map(|v| **v).collect();
            let center = window[r];
            let prev = self.previous_input(g, center, last_hidden, last_center)?;
            let step = self.restore_step(g, store, &window, prev)?;
            outputs.push(step.rgb);
            last_hidden = Some(step.hidden);
            last_center = Some(center);
            let next = match incoming(t, r, raws.len()) {
                Some(i) => {
                    Arc::new(self.extract_features(g, store, &raws[i], &noise_map(&raws[i]))?)
                }
                None => buffer.newest().clone(),
            };
            buffer.push(next);
        }
        Ok(outputs)
    }

    /// Streaming inference over a clip; see [`ClipRestorer`].
    pub fn restorer<'a>(
        &'a self,
        store: &'a ParamStore,
        raws: &'a [RawFrame],
    ) -> Result<ClipRestorer<'a>> {
        ClipRestorer::new(self, store, raws)
    }

    /// Restore every frame of a clip.
    pub fn run_clip(&self, store: &ParamStore, raws: &[RawFrame]) -> Result<Vec<Tensor>> {
        self.restorer(store, raws)?.collect()
    }

    fn extract_value(&self, store: &ParamStore, raw: &RawFrame) -> Result<Arc<Tensor>> {
        let mut g = Graph::new();
        let v = self.extract_features(&mut g, store, raw, &noise_map(raw))?;
        Ok(Arc::new(g.value(v).clone()))
    }
}

/// Frame-by-frame inference. Between frames it keeps only the buffer
/// features, the previous hidden state and the previous centre feature.
pub struct ClipRestorer<'a> {
    net: &'a Network,
    store: &'a ParamStore,
    raws: &'a [RawFrame],
    t: usize,
    buffer: Option<FrameBuffer<Tensor>>,
    last_hidden: Option<Tensor>,
    last_center: Option<Arc<Tensor>>,
}

impl<'a> ClipRestorer<'a> {
    fn new(net: &'a Network, store: &'a ParamStore, raws: &'a [RawFrame]) -> Result<Self> {
        let first = raws
            .first()
            .ok_or_else(|| Error::Contract("cannot restore an empty clip".into()))?;
        net.check_frame_size(first.height(), first.width())?;
        Ok(Self {
            net,
            store,
            raws,
            t: 0,
            buffer: None,
            last_hidden: None,
            last_center: None,
        })
    }

    pub fn buffer(&self) -> Option<&FrameBuffer<Tensor>> {
        self.buffer.as_ref()
    }

    /// Restore the next frame, or `None` at the end of the clip.
    pub fn step(&mut self) -> Option<Result<Tensor>> {
        if self.t >= self.raws.len() {
            return None;
        }
        Some(self.step_inner())
    }

    fn step_inner(&mut self) -> Result<Tensor> {
        let (net, store) = (self.net, self.store);
        let r = net.config.radius();
        if self.buffer.is_none() {
            let mut feats = Vec::with_capacity(r + 1);
            for raw in self.raws.iter().take(r + 1) {
                feats.push(net.extract_value(store, raw)?);
            }
            self.buffer = Some(FrameBuffer::start(net.config.buffer, &feats)?);
        }
        let buffer = self.buffer.as_mut().expect("initialised above");
        let mut g = Graph::new();
        let window: Vec<Var> = buffer.slots().map(|f| g.constant((**f).clone())).collect();
        let center = window[r];
        let last_hidden = self.last_hidden.take().map(|h| g.constant(h));
        let last_center = self.last_center.take().map(|c| g.constant((*c).clone()));
        let prev = net.previous_input(&mut g, center, last_hidden, last_center)?;
        let out = net.restore_step(&mut g, store, &window, prev)?;
        let rgb = g.value(out.rgb).clone();
        self.last_hidden = Some(g.value(out.hidden).clone());
        self.last_center = Some(buffer.center().clone());
        drop(g);
        let next = match incoming(self.t, r, self.raws.len()) {
            Some(i) => net.extract_value(store, &self.raws[i])?,
            None => buffer.newest().clone(),
        };
        buffer.push(next);
        self.t += 1;
        Ok(rgb)
    }
}

impl Iterator for ClipRestorer<'_> {
    type Item = Result<Tensor>;

    fn next(&mut self) -> Option<Self::Item> {
        self.step()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{degrade_frame, BayerPattern, NoiseParams};
    use crate::rng::stream;
    use crate::scene;
    use crate::tensor::Shape;
    use alloc::vec;

    pub(crate) fn toy_config() -> NetConfig {
        NetConfig {
            feat_channels: 4,
            hidden_channels: 4,
            max_channels: 8,
            buffer: 3,
            f_max: 2,
            ..NetConfig::default()
        }
    }

    fn raw_clip(seed: u64, n: usize, size: usize) -> Vec<RawFrame> {
        let mut rng = stream(seed, "clip");
        (0..n)
            .map(|_| {
                let x = scene::natural_scene(size, size, &mut rng);
                degrade_frame(&x, NoiseParams::LOW, BayerPattern::Rggb, &mut rng).unwrap()
            })
            .collect()
    }

    #[test]
    fn buffer_ring_and_boundaries() {
        let f: Vec<Arc<char>> = "abcdef".chars().map(Arc::new).collect();
        let mut b = FrameBuffer::start(5, &f[..3]).unwrap();
        let got: Vec<char> = b.slots().map(|c| **c).collect();
        assert_eq!(got, vec!['a', 'a', 'a', 'b', 'c']);
        let mut full = FrameBuffer::start(5, &f[..1]).unwrap();
        assert!(full.slots().all(|s| Arc::ptr_eq(s, &f[0])));
        full.push(f[1].clone());
        assert_eq!(full.len(), 5);
        let before: Vec<Arc<char>> = b.slots().cloned().collect();
        b.push(f[3].clone());
        let after: Vec<Arc<char>> = b.slots().cloned().collect();
        for k in 0..4 {
            assert!(Arc::ptr_eq(&before[k + 1], &after[k]));
        }
        assert_eq!(*after[4], 'd');
        assert!(FrameBuffer::start(4, &f).is_err());
    }

    #[test]
    fn feature_shapes_and_zero_response() {
        let mut store = ParamStore::new();
        let net = Network::new(
            NetConfig {
                feat_channels: 32,
                ..toy_config()
            },
            &mut store,
            &mut stream(1, "init"),
        )
        .unwrap();
        let raw = raw_clip(1, 1, 32).remove(0);
        let mut g = Graph::new();
        let f = net
            .extract_features(&mut g, &store, &raw, &noise_map(&raw))
            .unwrap();
        assert_eq!(g.shape(f), Shape::new(32, 16, 16));
        let zero = RawFrame::new(
            Tensor::zeros(1, 32, 32),
            BayerPattern::Rggb,
            NoiseParams::NONE,
        )
        .unwrap();
        let f = net
            .extract_features(&mut g, &store, &zero, &Tensor::zeros(1, 32, 32))
            .unwrap();
        assert_eq!(g.value(f).max_abs(), 0.0);
        assert!(net
            .extract_features(&mut g, &store, &zero, &Tensor::zeros(1, 30, 32))
            .is_err());
    }

    #[test]
    fn to_rgb_shape_and_zero_response() {
        let mut store = ParamStore::new();
        let net = Network::new(toy_config(), &mut store, &mut stream(2, "init")).unwrap();
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(4, 16, 16));
        let rgb = net.to_rgb(&mut g, &store, h).unwrap();
        assert_eq!(g.shape(rgb), Shape::new(3, 32, 32));
        assert_eq!(g.value(rgb).max_abs(), 0.0);
    }

    #[test]
    fn rcm_rejects_sizes_not_divisible_by_16() {
        let mut store = ParamStore::new();
        let net = Network::new(toy_config(), &mut store, &mut stream(3, "init")).unwrap();
        let mut g = Graph::new();
        let feats: Vec<Var> = (0..3).map(|_| g.constant(Tensor::zeros(4, 8, 8))).collect();
        let prev = g.constant(Tensor::zeros(4, 8, 8));
        assert!(matches!(
            net.rcm(&mut g, &store, &feats, prev),
            Err(Error::Shape(_))
        ));
        let raws = raw_clip(3, 2, 16);
        assert!(matches!(net.run_clip(&store, &raws), Err(Error::Shape(_))));
        let feats: Vec<Var> = (0..3)
            .map(|_| g.constant(Tensor::zeros(4, 16, 16)))
            .collect();
        let prev = g.constant(Tensor::zeros(4, 16, 16));
        let h = net.rcm(&mut g, &store, &feats, prev).unwrap();
        assert_eq!(g.shape(h), Shape::new(4, 16, 16));
    }

    #[test]
    fn attention_gates_are_open_interval() {
        let mut store = ParamStore::new();
        let net = Network::new(toy_config(), &mut store, &mut stream(4, "init")).unwrap();
        let mut rng = stream(4, "x");
        let x = Tensor::from_fn(8, 1, 1, |_, _, _| rng.random_range(-5.0..5.0));
        let gates = net.attention_gates(&store, &x).unwrap();
        assert!(gates.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn run_clip_counts_extractions_and_is_deterministic() {
        let mut store = ParamStore::new();
        let net = Network::new(toy_config(), &mut store, &mut stream(5, "init")).unwrap();
        for n in [1usize, 2, 4] {
            let raws = raw_clip(5, n, 32);
            net.reset_extraction_count();
            let a = net.run_clip(&store, &raws).unwrap();
            assert_eq!(net.extraction_count(), n);
            assert_eq!(a.len(), n);
            let b = net.run_clip(&store, &raws).unwrap();
            assert_eq!(a, b);
            let mut g = Graph::new();
            net.reset_extraction_count();
            let vars = net.run_clip_graph(&mut g, &store, &raws).unwrap();
            assert_eq!(net.extraction_count(), n);
            for (v, t) in vars.iter().zip(&a) {
                assert_eq!(g.value(*v), t);
            }
        }
        assert!(net.run_clip(&store, &[]).is_err());
    }

    #[test]
    fn restorer_keeps_retained_slots() {
        let mut store = ParamStore::new();
        let net = Network::new(
            NetConfig {
                buffer: 5,
                ..toy_config()
            },
            &mut store,
            &mut stream(6, "init"),
        )
        .unwrap();
        let raws = raw_clip(6, 6, 32);
        let mut r = net.restorer(&store, &raws).unwrap();
        r.step().unwrap().unwrap();
        for _ in 1..6 {
            let before: Vec<Arc<Tensor>> = r.buffer().unwrap().slots().cloned().collect();
            let snapshot: Vec<Tensor> = before.iter().map(|t| (**t).clone()).collect();
            r.step().unwrap().unwrap();
            let after: Vec<Arc<Tensor>> = r.buffer().unwrap().slots().cloned().collect();
            for k in 0..4 {
                assert!(Arc::ptr_eq(&before[k + 1], &after[k]));
                assert_eq!(*after[k], snapshot[k + 1]);
            }
        }
        assert!(r.step().is_none());
    }

    #[test]
    fn hidden_modes_change_inputs() {
        let raws = raw_clip(7, 3, 32);
        let mut outs = Vec::new();
        for (mode, align) in [
            (HiddenMode::Recurrent, false),
            (HiddenMode::Recurrent, true),
            (HiddenMode::Zero, false),
            (HiddenMode::Shallow, false),
        ] {
            let mut store = ParamStore::new();
            let cfg = NetConfig {
                hidden_mode: mode,
                align_hidden: align,
                ..toy_config()
            };
            let net = Network::new(cfg, &mut store, &mut stream(7, "init")).unwrap();
            let out = net.run_clip(&store, &raws).unwrap();
            assert!(out.iter().all(Tensor::is_finite));
            outs.push(out);
        }
        // the first frame never sees a previous state
        assert_eq!(outs[0][0], outs[2][0]);
        assert_ne!(outs[0][2], outs[2][2]);
        assert_eq!(HiddenMode::from_name("shallow"), Some(HiddenMode::Shallow));
    }
}

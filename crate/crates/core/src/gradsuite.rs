//! Finite-difference checks of every differentiable stage, from single
//! graph operations up to the whole restoration network under the training
//! objective.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::degrade::isp::IspParams;
use crate::degrade::{noise_map, BayerPattern, NoiseParams};
use crate::error::Result;
use crate::glam::{build_pyramid, Glam};
use crate::gradcheck::{check_input, check_params_matching, GradCheck};
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::losses::{
    clip_loss, loss_dtc, loss_dtc_long, loss_p, loss_r, loss_rpc, ClipObjective, ConvFeatures,
    LossWeights, Perceptual, CHARBONNIER_EPS,
};
use crate::motion::{synth_clip, FlowSynthParams, SyntheticClip};
use crate::net::{HiddenMode, NetConfig, Network};
use crate::params::ParamStore;
use crate::rng::{stream, StreamRng};
use crate::scene;
use crate::tensor::Tensor;

/// Relative error allowed for a single stage.
pub const STAGE_TOLERANCE: f64 = 1e-4;
/// Relative error allowed for the whole network under the full objective.
pub const MODEL_TOLERANCE: f64 = 1e-3;

const STEP: f64 = 1e-6;
const SAMPLES: usize = 24;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub check: GradCheck,
    pub tolerance: f64,
}

impl SuiteEntry {
    /// Within tolerance and not vacuous.
    pub fn passed(&self) -> bool {
        self.check.relative_error() < self.tolerance && self.check.max_abs() > 0.0
    }
}

fn uniform(rng: &mut StreamRng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(lo..hi))
}

/// A smooth scalar of `x`: its Charbonnier distance to a fixed random target.
fn reduce(g: &mut Graph, x: Var, target: &Tensor) -> Result<Var> {
    let t = g.constant(target.clone());
    g.charbonnier(alloc::vec![(x, t, None)], CHARBONNIER_EPS)
}

struct Suite {
    rng: StreamRng,
    entries: Vec<SuiteEntry>,
}

impl Suite {
    fn input(
        &mut self,
        name: &str,
        x: &Tensor,
        out_shape: (usize, usize, usize),
        f: impl Fn(&mut Graph, Var) -> Result<Var>,
    ) -> Result<()> {
        let (c, h, w) = out_shape;
        let target = uniform(&mut self.rng, c, h, w, -1.0, 1.0);
        let check = check_input(x, STEP, SAMPLES, &mut self.rng, |g, v| {
            let y = f(g, v)?;
            reduce(g, y, &target)
        })?;
        self.push(name, check, STAGE_TOLERANCE);
        Ok(())
    }

    fn scalar_input(
        &mut self,
        name: &str,
        x: &Tensor,
        f: impl Fn(&mut Graph, Var) -> Result<Var>,
    ) -> Result<()> {
        let check = check_input(x, STEP, SAMPLES, &mut self.rng, f)?;
        self.push(name, check, STAGE_TOLERANCE);
        Ok(())
    }

    fn params(
        &mut self,
        name: &str,
        store: &ParamStore,
        prefix: &str,
        tolerance: f64,
        f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
    ) -> Result<()> {
        let check = check_params_matching(store, prefix, STEP, SAMPLES, &mut self.rng, f)?;
        self.push(name, check, tolerance);
        Ok(())
    }

    fn push(&mut self, name: &str, check: GradCheck, tolerance: f64) {
        self.entries.push(SuiteEntry {
            name: name.into(),
            check,
            tolerance,
        });
    }
}

fn toy_config() -> NetConfig {
    NetConfig {
        feat_channels: 4,
        hidden_channels: 4,
        max_channels: 8,
        buffer: 3,
        f_max: 2,
        hidden_mode: HiddenMode::Recurrent,
        ..NetConfig::default()
    }
}

fn toy_clip(seed: u64, frames: usize) -> Result<SyntheticClip> {
    let mut rng = stream(seed, "suite.clip");
    let x = scene::natural_scene(40, 40, &mut rng);
    let clip = synth_clip(
        &x,
        frames,
        NoiseParams::LOW,
        &FlowSynthParams::default(),
        BayerPattern::Rggb,
        &mut rng,
    )?;
    clip.crop(4, 4, 32, 32)
}

/// Run every check. Entries come back in a fixed order for a given seed.
pub fn suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut s = Suite {
        rng: stream(seed, "suite"),
        entries: Vec::new(),
    };
    let r = &mut stream(seed, "suite.data");

    let x = uniform(r, 3, 6, 7, -1.0, 1.0);
    let w = uniform(r, 4, 3, 9, -0.5, 0.5);
    let b = uniform(r, 4, 1, 1, -0.5, 0.5);
    {
        let (w, b) = (w.clone(), b.clone());
        s.input("conv2d input", &x, (4, 6, 7), move |g, v| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            g.conv2d(v, wv, Some(bv), 1, 1)
        })?;
    }
    {
        let (x, b) = (x.clone(), b.clone());
        s.input("conv2d weight", &w, (4, 3, 4), move |g, v| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            g.conv2d_padded(xv, v, Some(bv), 2, 1, Padding::Replicate)
        })?;
    }
    {
        let (x, w) = (x.clone(), w.clone());
        s.input("conv2d bias", &b, (4, 6, 7), move |g, v| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            g.conv2d_padded(xv, wv, Some(v), 1, 1, Padding::Replicate)
        })?;
    }
    let wt = uniform(r, 3, 2, 4, -0.5, 0.5);
    {
        let wt = wt.clone();
        s.input("transposed conv input", &x, (2, 12, 14), move |g, v| {
            let wv = g.constant(wt.clone());
            g.conv_transpose2(v, wv, None)
        })?;
    }
    {
        let x = x.clone();
        s.input("transposed conv weight", &wt, (2, 12, 14), move |g, v| {
            let xv = g.constant(x.clone());
            g.conv_transpose2(xv, v, None)
        })?;
    }

    let offsets = uniform(r, 18, 6, 7, -1.5, 1.5);
    {
        let (w, b, offsets) = (w.clone(), b.clone(), offsets.clone());
        s.input("deformable conv input", &x, (4, 6, 7), move |g, v| {
            let (ov, wv, bv) = (
                g.constant(offsets.clone()),
                g.constant(w.clone()),
                g.constant(b.clone()),
            );
            g.deform_conv3(v, ov, wv, Some(bv))
        })?;
    }
    {
        let (x, w) = (x.clone(), w.clone());
        s.input(
            "deformable conv offsets",
            &offsets,
            (4, 6, 7),
            move |g, v| {
                let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
                g.deform_conv3(xv, v, wv, None)
            },
        )?;
    }
    {
        let (x, offsets) = (x.clone(), offsets.clone());
        s.input("deformable conv weight", &w, (4, 6, 7), move |g, v| {
            let (xv, ov) = (g.constant(x.clone()), g.constant(offsets.clone()));
            g.deform_conv3(xv, ov, v, None)
        })?;
    }

    let img = scene::smooth_texture(3, 12, 12, r);
    let flow = uniform(r, 2, 12, 12, -2.5, 2.5);
    {
        let flow = flow.clone();
        s.input("warp image", &img, (3, 12, 12), move |g, v| {
            let fv = g.constant(flow.clone());
            g.warp(v, fv)
        })?;
    }
    {
        let img = img.clone();
        s.input("warp flow", &flow, (3, 12, 12), move |g, v| {
            let iv = g.constant(img.clone());
            g.warp(iv, v)
        })?;
    }

    s.input("leaky relu", &x, (3, 6, 7), |g, v| Ok(g.leaky_relu(v, 0.1)))?;
    s.input("sigmoid", &x, (3, 6, 7), |g, v| Ok(g.sigmoid(v)))?;
    {
        let other = uniform(r, 3, 6, 7, -1.0, 1.0);
        s.input("product", &x, (3, 6, 7), move |g, v| {
            let o = g.constant(other.clone());
            let p = g.mul(v, o)?;
            let q = g.mul(v, v)?;
            let d = g.sub(p, q)?;
            let e = g.add(d, v)?;
            Ok(g.scale(e, 0.7))
        })?;
    }
    {
        let gate = uniform(r, 3, 1, 1, 0.1, 0.9);
        s.input("broadcast product", &x, (3, 6, 7), move |g, v| {
            let c = g.constant(gate.clone());
            g.mul(v, c)
        })?;
    }
    {
        let other = uniform(r, 2, 6, 7, -1.0, 1.0);
        s.input("concat", &x, (5, 6, 7), move |g, v| {
            let o = g.constant(other.clone());
            g.concat(&[o, v])
        })?;
    }
    s.input("global average pool", &x, (3, 1, 1), |g, v| {
        Ok(g.global_avg_pool(v))
    })?;
    s.input("channel mean", &x, (1, 6, 7), |g, v| Ok(g.channel_mean(v)))?;
    s.input("channel max", &x, (1, 6, 7), |g, v| Ok(g.channel_max(v)))?;
    let even = uniform(r, 4, 6, 8, -1.0, 1.0);
    s.input("average pool", &even, (4, 3, 4), |g, v| g.avg_pool2(v))?;
    s.input("upsample", &even, (4, 12, 16), |g, v| Ok(g.upsample2(v)))?;
    s.input("depth to space", &even, (1, 12, 16), |g, v| {
        g.depth_to_space2(v)
    })?;

    let linear = Tensor::from_fn(3, 8, 8, |_, _, _| 0.25 + r.random_range(-0.1..0.1));
    {
        let isp = IspParams::default();
        s.input("camera pipeline", &linear, (3, 8, 8), move |g, v| {
            g.isp(v, &isp)
        })?;
    }
    {
        let t = uniform(r, 3, 8, 8, 0.0, 1.0);
        let mask = Tensor::from_fn(1, 8, 8, |_, y, x| ((x + y) % 3 != 0) as u8 as f64);
        s.scalar_input("masked charbonnier", &linear, move |g, v| {
            let tv = g.constant(t.clone());
            g.charbonnier(alloc::vec![(v, tv, Some(mask.clone()))], CHARBONNIER_EPS)
        })?;
    }
    {
        let t = uniform(r, 3, 8, 8, 0.0, 1.0);
        s.scalar_input("weighted sum", &linear, move |g, v| {
            let tv = g.constant(t.clone());
            let a = g.charbonnier(alloc::vec![(v, tv, None)], CHARBONNIER_EPS)?;
            let q = g.mul(v, v)?;
            let b = g.charbonnier(alloc::vec![(q, tv, None)], CHARBONNIER_EPS)?;
            g.weighted_sum(&[(a, 0.3), (b, 1.7)])
        })?;
    }

    let phi = ConvFeatures::default();
    let frame = scene::natural_scene(16, 16, r);
    {
        let targets: Vec<Tensor> = {
            let mut g = Graph::new();
            let v = g.constant(frame.clone());
            phi.features(&mut g, v)?
                .into_iter()
                .map(|f| {
                    let t = g.value(f);
                    let noise = uniform(r, t.channels(), t.height(), t.width(), -0.2, 0.2);
                    t.zip_map(&noise, |a, b| a + b)
                })
                .collect::<Result<_>>()?
        };
        let phi = phi.clone();
        s.scalar_input("perceptual features", &frame, move |g, v| {
            let feats = phi.features(g, v)?;
            let terms = feats
                .iter()
                .zip(&targets)
                .map(|(&f, t)| (f, g.constant(t.clone()), None))
                .collect();
            g.charbonnier(terms, CHARBONNIER_EPS)
        })?;
    }

    let mut store = ParamStore::new();
    let net = Network::new(toy_config(), &mut store, &mut stream(seed, "suite.init"))?;
    net.glam
        .perturb_offset_heads(&mut store, &mut stream(seed, "suite.offsets"), 0.5);
    let c = net.config.feat_channels;
    let feat_ref = scene::smooth_texture(c, 16, 16, r);
    let feat_tgt = scene::smooth_texture(c, 16, 16, r);
    glam_checks(&mut s, &net.glam, &store, &feat_ref, &feat_tgt)?;

    {
        let aligned: Vec<Tensor> = (0..net.config.buffer)
            .map(|_| scene::smooth_texture(c, 16, 16, r))
            .collect();
        let prev = scene::smooth_texture(net.config.hidden_channels, 16, 16, r);
        let target = uniform(r, net.config.hidden_channels, 16, 16, -1.0, 1.0);
        s.params(
            "recurrent cell",
            &store,
            "rcm.",
            STAGE_TOLERANCE,
            |g, st| {
                let a: Vec<Var> = aligned.iter().map(|t| g.constant(t.clone())).collect();
                let p = g.constant(prev.clone());
                let h = net.rcm(g, st, &a, p)?;
                reduce(g, h, &target)
            },
        )?;
    }

    let clip = toy_clip(seed, 5)?;
    let restored: Vec<Tensor> = clip
        .clean
        .iter()
        .map(|f| {
            let n = uniform(r, 3, 32, 32, -0.05, 0.05);
            f.zip_map(&n, |a, b| a + b)
        })
        .collect::<Result<_>>()?;
    loss_checks(&mut s, &phi, &clip, &restored)?;

    {
        let objective = ClipObjective {
            weights: LossWeights::FULL,
            long_gap: 2,
            ..ClipObjective::default()
        };
        let isp = IspParams::default();
        let clip = toy_clip(seed ^ 1, 4)?;
        s.params(
            "whole network, full objective",
            &store,
            "",
            MODEL_TOLERANCE,
            |g, st| {
                let out = net.run_clip_graph(g, st, &clip.raw)?;
                Ok(clip_loss(g, &objective, &phi, &isp, &out, &clip)?.0)
            },
        )?;
        let raw = clip.raw[0].clone();
        let noise = noise_map(&raw);
        let target = uniform(r, c, 16, 16, -1.0, 1.0);
        s.params(
            "feature extraction",
            &store,
            "extract.",
            STAGE_TOLERANCE,
            |g, st| {
                let f = net.extract_features(g, st, &raw, &noise)?;
                reduce(g, f, &target)
            },
        )?;
        let hidden = scene::smooth_texture(net.config.hidden_channels, 16, 16, r);
        let target = uniform(r, 3, 32, 32, -1.0, 1.0);
        s.params(
            "output head",
            &store,
            "to_rgb.",
            STAGE_TOLERANCE,
            |g, st| {
                let h = g.constant(hidden.clone());
                let y = net.to_rgb(g, st, h)?;
                reduce(g, y, &target)
            },
        )?;
    }
    Ok(s.entries)
}

fn glam_checks(
    s: &mut Suite,
    glam: &Glam,
    store: &ParamStore,
    feat_ref: &Tensor,
    feat_tgt: &Tensor,
) -> Result<()> {
    let c = glam.channels;
    let rng = &mut stream(0x61a4, "suite.glam");
    let off_target = uniform(rng, 18, 8, 8, -1.0, 1.0);
    let coarse_offsets = uniform(rng, 18, 4, 4, -0.8, 0.8);
    let half_ref = crate::kernels::avg_pool2(feat_ref)?;
    let half_tgt = crate::kernels::avg_pool2(feat_tgt)?;
    s.params(
        "alignment offsets",
        store,
        "glam.l1.offset",
        STAGE_TOLERANCE,
        |g, st| {
            let (a, b) = (g.constant(half_ref.clone()), g.constant(half_tgt.clone()));
            let coarse = g.constant(coarse_offsets.clone());
            let o = glam.estimate_offsets(g, st, 1, a, b, Some(coarse))?;
            reduce(g, o, &off_target)
        },
    )?;
    {
        let (a, b) = (half_ref.clone(), coarse_offsets.clone());
        s.input(
            "alignment offsets input",
            &half_tgt,
            (18, 8, 8),
            move |g, v| {
                let (av, cv) = (g.constant(a.clone()), g.constant(b.clone()));
                glam.estimate_offsets(g, store, 1, av, v, Some(cv))
            },
        )?;
    }
    let offsets = uniform(rng, 18, 8, 8, -1.2, 1.2);
    let coarse_aligned = scene::smooth_texture(c, 4, 4, rng);
    let out_target = uniform(rng, c, 8, 8, -1.0, 1.0);
    for (name, prefix) in [
        ("deformable sampling", "glam.l1.deform"),
        ("alignment fusion", "glam.l1.fuse"),
    ] {
        s.params(name, store, prefix, STAGE_TOLERANCE, |g, st| {
            let t = g.constant(half_tgt.clone());
            let o = g.constant(offsets.clone());
            let ca = g.constant(coarse_aligned.clone());
            let y = glam.deform_sample(g, st, 1, t, o, Some(ca))?;
            reduce(g, y, &out_target)
        })?;
    }
    {
        let t = half_tgt.clone();
        let ca = coarse_aligned.clone();
        let target = out_target.clone();
        let check = check_input(&offsets, STEP, SAMPLES, &mut s.rng, move |g, v| {
            let (tv, cv) = (g.constant(t.clone()), g.constant(ca.clone()));
            let y = glam.deform_sample(g, store, 1, tv, v, Some(cv))?;
            reduce(g, y, &target)
        })?;
        s.push("deformable sampling offsets", check, STAGE_TOLERANCE);
    }
    let full_target = uniform(rng, c, 16, 16, -1.0, 1.0);
    s.params(
        "pyramid alignment",
        store,
        "glam.",
        STAGE_TOLERANCE,
        |g, st| {
            let a = g.constant(feat_ref.clone());
            let b = g.constant(feat_tgt.clone());
            let (pa, pb) = (build_pyramid(g, a)?, build_pyramid(g, b)?);
            let (y, _) = glam.align(g, st, &pa, &pb)?;
            reduce(g, y, &full_target)
        },
    )?;
    {
        let a = feat_ref.clone();
        s.input(
            "pyramid alignment input",
            feat_tgt,
            (c, 16, 16),
            move |g, v| {
                let av = g.constant(a.clone());
                let (pa, pb) = (build_pyramid(g, av)?, build_pyramid(g, v)?);
                Ok(glam.align(g, store, &pa, &pb)?.0)
            },
        )?;
    }
    Ok(())
}

fn loss_checks(
    s: &mut Suite,
    phi: &ConvFeatures,
    clip: &SyntheticClip,
    restored: &[Tensor],
) -> Result<()> {
    let isp = IspParams::default();
    let k = 1;
    let frames = |g: &mut Graph, v: Var| -> (Vec<Var>, Vec<Var>) {
        let out = restored
            .iter()
            .enumerate()
            .map(|(i, t)| if i == k { v } else { g.constant(t.clone()) })
            .collect();
        let tgt = clip.clean.iter().map(|t| g.constant(t.clone())).collect();
        (out, tgt)
    };
    s.scalar_input("reconstruction loss", &restored[k], |g, v| {
        let (a, b) = frames(g, v);
        loss_r(g, &a, &b, &isp, CHARBONNIER_EPS)
    })?;
    s.scalar_input("perceptual loss", &restored[k], |g, v| {
        let (a, b) = frames(g, v);
        loss_p(g, phi as &dyn Perceptual, &a, &b, &isp, CHARBONNIER_EPS)
    })?;
    s.scalar_input("short-term consistency loss", &restored[k], |g, v| {
        let (a, _) = frames(g, v);
        loss_dtc(g, &a, clip, CHARBONNIER_EPS)
    })?;
    s.scalar_input("long-term consistency loss", &restored[k], |g, v| {
        let (a, _) = frames(g, v);
        loss_dtc_long(g, &a, clip, 2, CHARBONNIER_EPS)
    })?;
    s.scalar_input("relational perceptual loss", &restored[k], |g, v| {
        let (a, b) = frames(g, v);
        loss_rpc(g, phi as &dyn Perceptual, &a, &b, CHARBONNIER_EPS)
    })?;
    Ok(())
}

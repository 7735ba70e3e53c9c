//! Acceptance checks, one PASS/FAIL line each. Exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use vjdd::checkpoint::Checkpoint;
use vjdd::config::{NoiseLevel, RunConfig};
use vjdd::harness::{eval_clips, evaluate, evaluate_baseline, train_stage, StageStart, Variant};
use vjdd_core::baseline::Baseline;
use vjdd_core::degrade::{add_noise, BayerPattern, NoiseParams};
use vjdd_core::flowmetrics::{psnr, rwe, warping_error};
use vjdd_core::glam::{deform_conv, global_align, GlobalShift};
use vjdd_core::gradsuite::suite;
use vjdd_core::graph::{Graph, Var};
use vjdd_core::kernels::{conv2d, Padding};
use vjdd_core::layers::LEAKY_SLOPE;
use vjdd_core::losses::{
    loss_dtc, loss_dtc_long, loss_p, loss_r, loss_rpc, ConvFeatures, CHARBONNIER_EPS,
    DEFAULT_LONG_GAP,
};
use vjdd_core::motion::{affine_flow, compose_flows, synth_clip, warp, FlowField, FlowSynthParams};
use vjdd_core::net::{NetConfig, Network};
use vjdd_core::params::{kaiming_uniform, ParamStore};
use vjdd_core::rng::stream;
use vjdd_core::train::Stage;
use vjdd_core::{scene, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Runner {
    failures: usize,
}

impl Runner {
    fn run(&mut self, id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let (pass, detail) = match result {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
            Err(d) => (false, d),
        };
        if !pass {
            self.failures += 1;
        }
        println!(
            "{} [{id:>2}] {name} ({:.1}s): {detail}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
}

fn noise_variance() -> Outcome {
    let p = NoiseParams::HIGH;
    let x = Tensor::full(1, 1000, 1000, 0.5);
    let y = add_noise(&x, p, &mut stream(11, "acceptance.noise")).map_err(|e| e.to_string())?;
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let var = y
        .data()
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (n - 1.0);
    let want = 3.6e-3;
    let rel = (var - want).abs() / want;
    check(
        rel <= 0.02,
        format!("variance {var:.6e}, relative error {rel:.4}"),
    )
}

fn warp_algebra() -> Outcome {
    let mut rng = stream(12, "acceptance.warp");
    let img = Tensor::from_fn(3, 40, 36, |_, _, _| rng.random::<f64>());
    let (out, _) = warp(&img, &FlowField::zeros(40, 36)).map_err(|e| e.to_string())?;
    let identical = out
        .data()
        .iter()
        .zip(img.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let mut exact = true;
    for (a, b) in [
        ((1.0, 2.0), (3.0, -1.0)),
        ((-0.5, 0.25), (1.75, 0.5)),
        ((0.0, 0.0), (-2.0, 3.0)),
    ] {
        let c = compose_flows(
            &FlowField::constant(20, 24, a.0, a.1),
            &FlowField::constant(20, 24, b.0, b.1),
        )
        .map_err(|e| e.to_string())?;
        exact &= c == FlowField::constant(20, 24, a.0 + b.0, a.1 + b.1);
    }
    let tex = scene::smooth_texture(3, 64, 64, &mut stream(12, "acceptance.tex"));
    let mut worst: f64 = 0.0;
    for (fa, fb) in [
        ((1.3, -0.7, 0.01, 1.005), (-0.4, 0.9, -0.015, 0.997)),
        ((2.0, 1.0, 0.02, 0.99), (1.5, -1.5, 0.01, 1.01)),
    ] {
        let a = affine_flow(64, 64, fa.0, fa.1, fa.2, fa.3);
        let b = affine_flow(64, 64, fb.0, fb.1, fb.2, fb.3);
        let (once, mask) = warp(&tex, &compose_flows(&a, &b).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let (twice, _) =
            warp(&warp(&tex, &a).map_err(|e| e.to_string())?.0, &b).map_err(|e| e.to_string())?;
        let (mut err, mut n) = (0.0, 0usize);
        for c in 0..3 {
            for y in 6..58 {
                for x in 6..58 {
                    if mask.at(0, y, x) == 1.0 {
                        err += (once.at(c, y, x) - twice.at(c, y, x)).abs();
                        n += 1;
                    }
                }
            }
        }
        worst = worst.max(err / n as f64);
    }
    check(
        identical && exact && worst <= 1e-3,
        format!("zero-flow identical {identical}, constant composition exact {exact}, interior MAE {worst:.2e}"),
    )
}

fn global_shift_recovery() -> Outcome {
    let (size, margin) = (32usize, 4usize);
    let mut rng = stream(13, "acceptance.align");
    let big = {
        let tex = scene::natural_scene(size + 2 * margin, size + 2 * margin, &mut rng);
        Tensor::from_fn(8, size + 2 * margin, size + 2 * margin, |c, y, x| {
            tex.at(c % 3, y, x) + 0.3 * rng.random::<f64>()
        })
    };
    let reference = big
        .crop(margin, margin, size, size)
        .map_err(|e| e.to_string())?;
    let mut misses = Vec::new();
    for u in -4..=4 {
        for v in -4..=4 {
            let m = margin as i32;
            let target = big
                .crop((m - v) as usize, (m - u) as usize, size, size)
                .map_err(|e| e.to_string())?;
            let got = global_align(&reference, &target, 4).map_err(|e| e.to_string())?;
            if got != GlobalShift::new(u, v) {
                misses.push(format!("({u},{v})->({},{})", got.u, got.v));
            }
        }
    }
    check(misses.is_empty(), format!("81 shifts, misses {misses:?}"))
}

fn deformable_reduction() -> Outcome {
    let mut rng = stream(14, "acceptance.deform");
    let mut worst: f64 = 0.0;
    for (c, h, w, co) in [(5, 12, 10, 7), (16, 16, 16, 16), (3, 9, 13, 4)] {
        let x = Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0));
        let wt = kaiming_uniform(&mut rng, co, c, 9, LEAKY_SLOPE);
        let b = Tensor::from_fn(co, 1, 1, |_, _, _| rng.random_range(-0.5..0.5));
        let d =
            deform_conv(&x, &Tensor::zeros(18, h, w), &wt, Some(&b)).map_err(|e| e.to_string())?;
        let r = conv2d(&x, &wt, Some(&b), 1, 1, Padding::Replicate).map_err(|e| e.to_string())?;
        worst = worst.max(
            d.zip_map(&r, |p, q| (p - q).abs())
                .map_err(|e| e.to_string())?
                .max_abs(),
        );
    }
    check(worst <= 1e-12, format!("max abs difference {worst:.2e}"))
}

fn gradient_suite() -> Outcome {
    let entries = suite(7).map_err(|e| e.to_string())?;
    let failed: Vec<String> = entries
        .iter()
        .filter(|e| !e.passed())
        .map(|e| format!("{} ({:.2e})", e.name, e.check.relative_error()))
        .collect();
    let worst = entries
        .iter()
        .filter(|e| e.tolerance < 1e-3)
        .map(|e| e.check.relative_error())
        .fold(0.0, f64::max);
    let model = entries
        .iter()
        .filter(|e| e.tolerance >= 1e-3)
        .map(|e| e.check.relative_error())
        .fold(0.0, f64::max);
    check(
        failed.is_empty(),
        format!(
            "{} checks, worst stage {worst:.2e}, whole model {model:.2e}, failed {failed:?}",
            entries.len()
        ),
    )
}

fn constants(g: &mut Graph, xs: &[Tensor]) -> Vec<Var> {
    xs.iter().map(|x| g.constant(x.clone())).collect()
}

fn metric_identities() -> Outcome {
    let mut rng = stream(16, "acceptance.metrics");
    let x = scene::natural_scene(48, 48, &mut rng);
    let clip = synth_clip(
        &x,
        6,
        NoiseParams::LOW,
        &FlowSynthParams::default(),
        BayerPattern::Rggb,
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    let (x0, x1) = (&clip.clean[0], &clip.clean[1]);
    let r = rwe(x0, x1, x0, x1).map_err(|e| e.to_string())?;
    let we = warping_error(x0, x0, x0, x0).map_err(|e| e.to_string())?;
    let p = psnr(x0, x0).map_err(|e| e.to_string())?;

    let mut g = Graph::new();
    let v = constants(&mut g, &clip.clean);
    let isp = Default::default();
    let phi = ConvFeatures::default();
    let eps = CHARBONNIER_EPS;
    let n = clip.len() as f64;
    let lr = loss_r(&mut g, &v, &v, &isp, eps).map_err(|e| e.to_string())?;
    let lp = loss_p(&mut g, &phi, &v, &v, &isp, eps).map_err(|e| e.to_string())?;
    let lc = loss_rpc(&mut g, &phi, &v, &v, eps).map_err(|e| e.to_string())?;
    let floors = [
        (g.value(lr).item(), 2.0 * n * eps),
        (g.value(lp).item(), n * eps),
        (g.value(lc).item(), (n - 1.0) * eps),
    ];
    let floors_ok = floors.iter().all(|(got, want)| (got - want).abs() <= 1e-15);
    check(
        r == 0.0 && we == 0.0 && p == f64::INFINITY && floors_ok,
        format!("RWE {r}, static WE {we}, PSNR {p}, floors (got, want) {floors:?}"),
    )
}

fn oracle_dtc_bound() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let mut rng = stream(seed, "acceptance.oracle");
        let x = scene::natural_scene(48, 48, &mut rng);
        let clip = synth_clip(
            &x,
            8,
            NoiseParams::HIGH,
            &FlowSynthParams::default(),
            BayerPattern::Rggb,
            &mut rng,
        )
        .and_then(|c| c.crop(8, 8, 32, 32))
        .map_err(|e| e.to_string())?;
        for gap in [1, DEFAULT_LONG_GAP] {
            let mut bound = 0.0;
            for t in 0..clip.len() - gap {
                let (flow, mask) = clip.pair(t, gap).map_err(|e| e.to_string())?;
                let (w, _) = warp(&clip.clean[t], &flow).map_err(|e| e.to_string())?;
                let mut ss = 0.0;
                for (i, (a, b)) in w.data().iter().zip(clip.clean[t + gap].data()).enumerate() {
                    let m = mask.data()[i % mask.len()];
                    ss += m * (a - b) * (a - b);
                }
                bound += (ss + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt();
            }
            let mut g = Graph::new();
            let f = constants(&mut g, &clip.clean);
            let l = if gap == 1 {
                loss_dtc(&mut g, &f, &clip, CHARBONNIER_EPS)
            } else {
                loss_dtc_long(&mut g, &f, &clip, gap, CHARBONNIER_EPS)
            }
            .map_err(|e| e.to_string())?;
            let value = g.value(l).item();
            ok &= value <= bound * (1.0 + 1e-12);
            lines.push(format!("gap {gap}: {value:.4e} <= {bound:.4e}"));
        }
    }
    check(ok, lines.join(", "))
}

fn feature_reuse() -> Outcome {
    let config = NetConfig {
        feat_channels: 8,
        hidden_channels: 8,
        max_channels: 16,
        buffer: 5,
        ..NetConfig::default()
    };
    let mut store = ParamStore::new();
    let net = Network::new(config, &mut store, &mut stream(18, "acceptance.init"))
        .map_err(|e| e.to_string())?;
    let mut rng = stream(18, "acceptance.clip");
    let x = scene::natural_scene(48, 48, &mut rng);
    let frames = 9;
    let clip = synth_clip(
        &x,
        frames,
        NoiseParams::LOW,
        &FlowSynthParams::default(),
        BayerPattern::Rggb,
        &mut rng,
    )
    .and_then(|c| c.crop(8, 8, 32, 32))
    .map_err(|e| e.to_string())?;
    net.reset_extraction_count();
    let mut restorer = net.restorer(&store, &clip.raw).map_err(|e| e.to_string())?;
    let mut steps = 0;
    let mut retained_ok = true;
    loop {
        let before: Option<Vec<(Arc<Tensor>, Tensor)>> = restorer
            .buffer()
            .map(|b| b.slots().map(|s| (s.clone(), (**s).clone())).collect());
        match restorer.step() {
            None => break,
            Some(r) => {
                r.map_err(|e| e.to_string())?;
                steps += 1;
            }
        }
        if let (Some(before), Some(after)) = (before, restorer.buffer()) {
            let after: Vec<Arc<Tensor>> = after.slots().cloned().collect();
            for k in 0..config.buffer - 1 {
                let (old, snapshot) = &before[k + 1];
                retained_ok &= Arc::ptr_eq(old, &after[k]) && *after[k] == *snapshot;
            }
        }
    }
    let count = net.extraction_count();
    check(
        count == frames && steps == frames && retained_ok,
        format!(
            "{frames} frames, {count} extractions, {} retained slots unchanged per step: {retained_ok}",
            config.buffer - 1
        ),
    )
}

/// Desk-scale model and schedule used by the training checks.
fn toy_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 2024;
    c.model.feat_channels = 8;
    c.model.hidden_channels = 16;
    c.model.max_channels = 32;
    c.model.buffer = 3;
    c.train.batch = 1;
    c.train.stage1_clip_len = 2;
    c.train.stage2_clip_len = 6;
    c.train.stage1_steps = 12_000;
    c.train.stage2_steps = 2000;
    c.train.lr = 2e-3;
    c.train.level = NoiseLevel::Low;
    c.train.lr_floor = 1e-5;
    c.eval.level = NoiseLevel::Low;
    c.eval.clips = 4;
    c.eval.clip_len = 6;
    c.eval.size = 32;
    c
}

fn stage_one(config: &RunConfig) -> Result<Checkpoint, String> {
    train_stage(
        config,
        Stage::Pretrain,
        StageStart::default(),
        &mut std::io::sink(),
    )
    .map_err(|e| e.to_string())
}

fn training_efficacy(config: &RunConfig, pretrained: &Checkpoint) -> Outcome {
    let clips = eval_clips(config).map_err(|e| e.to_string())?;
    let model = evaluate(pretrained, &clips).map_err(|e| e.to_string())?;
    let base = evaluate_baseline(Baseline::Bilinear, config, &clips).map_err(|e| e.to_string())?;
    let (m, b) = (
        model.mean_psnr().unwrap_or(f64::NAN),
        base.mean_psnr().unwrap_or(f64::NAN),
    );
    check(
        m - b >= 1.0,
        format!(
            "model {m:.2} dB vs bilinear {b:.2} dB (gain {:.2} dB)",
            m - b
        ),
    )
}

fn ablation_direction(config: &RunConfig, pretrained: &Checkpoint) -> Outcome {
    let clips = eval_clips(config).map_err(|e| e.to_string())?;
    let mut scores = Vec::new();
    for variant in [Variant::WithoutTemporal, Variant::Full] {
        let vc = variant.apply(config);
        let mut from = pretrained.clone();
        from.config = vc.clone();
        let done = train_stage(
            &vc,
            Stage::Full,
            StageStart {
                from: Some(&from),
                ..StageStart::default()
            },
            &mut std::io::sink(),
        )
        .map_err(|e| e.to_string())?;
        let r = evaluate(&done, &clips).map_err(|e| e.to_string())?;
        scores.push((
            variant.label(),
            r.mean_we().unwrap_or(f64::NAN),
            r.mean_rwe().unwrap_or(f64::NAN),
            r.mean_psnr().unwrap_or(f64::NAN),
        ));
    }
    let (without, full) = (scores[0], scores[1]);
    check(
        full.1 <= without.1 && full.2 <= without.2,
        format!(
            "{}: WE {:.5} RWE {:.5} PSNR {:.2}; {}: WE {:.5} RWE {:.5} PSNR {:.2}",
            without.0, without.1, without.2, without.3, full.0, full.1, full.2, full.3
        ),
    )
}

fn vjdd(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vjdd"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "vjdd {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<Vec<String>, String> {
    let mut differing = Vec::new();
    for n in names {
        let x = std::fs::read(a.join(n)).map_err(|e| format!("{n}: {e}"))?;
        let y = std::fs::read(b.join(n)).map_err(|e| format!("{n}: {e}"))?;
        if x != y {
            differing.push(n.to_string());
        }
    }
    Ok(differing)
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let small = [
        "--set",
        "seed=5",
        "--set",
        "model.feat_channels=4",
        "--set",
        "model.hidden_channels=8",
        "--set",
        "model.max_channels=8",
        "--set",
        "model.buffer=3",
        "--set",
        "train.batch=2",
        "--set",
        "train.clip_len=3",
        "--set",
        "train.stage1_steps=6",
        "--set",
        "train.stage2_steps=4",
        "--set",
        "train.checkpoint_every=3",
        "--set",
        "loss.long_gap=2",
        "--set",
        "eval.clips=2",
        "--set",
        "eval.clip_len=3",
    ];
    let mut first = vec!["train", "--out"];
    let a = p("train_a");
    first.push(&a);
    first.extend(small);
    vjdd(&first)?;
    let manifest = p("train_a/manifest.cfg");
    let b = p("train_b");
    vjdd(&["train", "--config", &manifest, "--out", &b])?;
    let mut differing = same_files(
        Path::new(&a),
        Path::new(&b),
        &[
            "manifest.cfg",
            "train.log",
            "checkpoints/pretrain-000003.ckpt",
            "checkpoints/pretrain.ckpt",
            "checkpoints/full.ckpt",
        ],
    )?;

    let ckpt = p("train_a/checkpoints/full.ckpt");
    let (e1, e2) = (p("eval_a"), p("eval_b"));
    vjdd(&[
        "eval",
        "--checkpoint",
        &ckpt,
        "--out",
        &e1,
        "--set",
        "eval.clips=2",
        "--set",
        "eval.clip_len=3",
    ])?;
    let eval_manifest = p("eval_a/manifest.cfg");
    vjdd(&[
        "eval",
        "--config",
        &eval_manifest,
        "--checkpoint",
        &ckpt,
        "--out",
        &e2,
    ])?;
    differing.extend(same_files(
        Path::new(&e1),
        Path::new(&e2),
        &[
            "manifest.cfg",
            "model.json",
            "bilinear.json",
            "bilinear+bilateral.json",
            "table.txt",
        ],
    )?);
    check(
        differing.is_empty(),
        format!("train and eval repeated from manifests; differing files {differing:?}"),
    )
}

fn main() -> ExitCode {
    let mut r = Runner { failures: 0 };
    let minutes = |m: u64| Duration::from_secs(60 * m);
    r.run(
        1,
        "noise variance at x=0.5, high level",
        Duration::from_secs(10),
        noise_variance,
    );
    r.run(
        2,
        "warp and composition algebra",
        Duration::from_secs(5),
        warp_algebra,
    );
    r.run(
        3,
        "global alignment recovers every shift in [-4,4]^2",
        Duration::from_secs(30),
        global_shift_recovery,
    );
    r.run(
        4,
        "deformable conv with zero offsets is a plain conv",
        Duration::MAX,
        deformable_reduction,
    );
    r.run(5, "gradient suite", minutes(5), gradient_suite);
    r.run(
        6,
        "metric identities and loss floors",
        Duration::MAX,
        metric_identities,
    );
    r.run(
        7,
        "oracle restorer stays within the warp residual bound",
        Duration::from_secs(30),
        oracle_dtc_bound,
    );
    r.run(
        8,
        "feature reuse across the frame buffer",
        Duration::MAX,
        feature_reuse,
    );

    let config = toy_config();
    let start = Instant::now();
    let pretrained = stage_one(&config);
    let stage_one_time = start.elapsed();
    match &pretrained {
        Ok(ck) => {
            let budget = minutes(10).saturating_sub(stage_one_time);
            let trained = stage_one_time.as_secs_f64();
            r.run(
                9,
                "stage-1 toy model beats bilinear by 1 dB",
                budget,
                || {
                    training_efficacy(&config, ck)
                        .map(|d| format!("{d}; after {trained:.0}s of stage-1 training"))
                },
            );
            let budget = minutes(30).saturating_sub(start.elapsed());
            r.run(
                10,
                "temporal losses do not worsen WE or RWE",
                budget,
                || {
                    ablation_direction(&config, ck).map(|d| {
                        format!(
                            "{d}; {:.0}s since stage 1 began",
                            start.elapsed().as_secs_f64()
                        )
                    })
                },
            );
        }
        Err(e) => {
            for (id, name) in [
                (9, "stage-1 toy model beats bilinear by 1 dB"),
                (10, "temporal losses do not worsen WE or RWE"),
            ] {
                r.run(id, name, Duration::MAX, || {
                    Err(format!("stage-1 training failed: {e}"))
                });
            }
        }
    }
    r.run(
        11,
        "runs repeated from their manifests are bit-identical",
        Duration::MAX,
        reproducibility,
    );

    if r.failures == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} acceptance criteria failed", r.failures);
        ExitCode::FAILURE
    }
}

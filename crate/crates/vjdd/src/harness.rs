//! Training, evaluation and ablation drivers.
//!
//! All randomness comes from named streams of the run seed: `data` picks
//! scenes, `noise` draws noise parameters and `flow` draws motion and sensor
//! noise. Each clip uses its own indexed sub-stream, so any step can be
//! regenerated on its own and a run is reproducible from its config alone.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use vjdd_core::baseline::Baseline;
use vjdd_core::degrade::isp::IspParams;
use vjdd_core::degrade::{BayerPattern, NoiseParams};
use vjdd_core::flowmetrics::{evaluate_clip, MetricOptions, MetricReport};
use vjdd_core::losses::{loss_p, ClipObjective, ConvFeatures, LossWeights};
use vjdd_core::motion::{synth_clip, SyntheticClip};
use vjdd_core::net::{HiddenMode, Network};
use vjdd_core::optim::{Adam, CosineSchedule};
use vjdd_core::params::ParamStore;
use vjdd_core::rng::indexed_stream;
use vjdd_core::scene;
use vjdd_core::train::{Stage, StepLog, Trainer};
use vjdd_core::{graph::Graph, Tensor};

use crate::checkpoint::{init_model, Checkpoint};
use crate::clip::{load_clip, Clip};
use crate::config::{NoiseLevel, NoiseRanges, RunConfig, Sampling};
use crate::error::{io_err, Error, Result};

/// Draw `(σs, σr)` from the configured ranges.
pub fn sample_noise_params(rng: &mut impl Rng, ranges: &NoiseRanges) -> NoiseParams {
    let draw = |rng: &mut _, (lo, hi): (f64, f64)| -> f64 {
        if lo == hi {
            return lo;
        }
        match ranges.sampling {
            Sampling::Log => {
                let v = 10f64.powf(Rng::random_range(rng, lo.log10()..=hi.log10()));
                v.clamp(lo, hi)
            }
            Sampling::Linear => Rng::random_range(rng, lo..=hi),
        }
    };
    let s = draw(rng, ranges.sigma_s);
    let r = draw(rng, ranges.sigma_r);
    NoiseParams::new(s, r).expect("ranges are validated positive")
}

/// Where clean source frames come from.
#[derive(Clone, Debug)]
pub enum SceneSource {
    Procedural,
    Clips(Vec<Clip>),
}

impl SceneSource {
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        let Some(dir) = &config.data else {
            return Ok(SceneSource::Procedural);
        };
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
            .collect::<Result<_>>()?;
        entries.sort();
        let clips = entries
            .iter()
            .map(|p| load_clip(p))
            .collect::<Result<Vec<_>>>()?;
        if clips.is_empty() {
            return Err(Error::Ingest {
                path: dir.clone(),
                reason: "no clips in data directory".into(),
            });
        }
        Ok(SceneSource::Clips(clips))
    }

    /// A clean `size × size` frame.
    pub fn scene(&self, size: usize, rng: &mut impl Rng) -> Result<Tensor> {
        match self {
            SceneSource::Procedural => Ok(scene::natural_scene(size, size, rng)),
            SceneSource::Clips(clips) => {
                let clip = &clips[rng.random_range(0..clips.len())];
                if clip.height() < size || clip.width() < size {
                    return Err(Error::Config(format!(
                        "clip {} is {}x{}, smaller than the {size}px crop",
                        clip.id,
                        clip.height(),
                        clip.width()
                    )));
                }
                let frame = &clip.frames[rng.random_range(0..clip.len())];
                let y0 = rng.random_range(0..=(clip.height() - size) / 2) * 2;
                let x0 = rng.random_range(0..=(clip.width() - size) / 2) * 2;
                Ok(frame.crop(y0, x0, size, size)?)
            }
        }
    }
}

/// Parameters shared by every synthetic clip of one kind.
#[derive(Clone, Copy, Debug)]
pub struct ClipRecipe<'a> {
    pub config: &'a RunConfig,
    /// Prefix of the stream names, e.g. `train` or `eval`.
    pub purpose: &'a str,
    pub seed: u64,
    pub level: NoiseLevel,
    pub size: usize,
    pub frames: usize,
}

impl ClipRecipe<'_> {
    /// Clip number `index`, rendered with a border that is cropped away.
    pub fn make(&self, source: &SceneSource, index: u64) -> Result<SyntheticClip> {
        let name = |s: &str| format!("{}.{s}", self.purpose);
        let mut data = indexed_stream(self.seed, &name("data"), index);
        let mut noise = indexed_stream(self.seed, &name("noise"), index);
        let mut flow = indexed_stream(self.seed, &name("flow"), index);
        let margin = self.config.train.margin;
        let x = source.scene(self.size + 2 * margin, &mut data)?;
        let params = match self.level.params() {
            Some(p) => p,
            None => sample_noise_params(&mut noise, &self.config.noise),
        };
        let clip = synth_clip(
            &x,
            self.frames,
            params,
            &self.config.motion,
            BayerPattern::Rggb,
            &mut flow,
        )?;
        Ok(clip.crop(margin, margin, self.size, self.size)?)
    }
}

fn train_recipe(config: &RunConfig, stage: Stage) -> ClipRecipe<'_> {
    ClipRecipe {
        config,
        purpose: match stage {
            Stage::Pretrain => "train.pretrain",
            Stage::Full => "train.full",
        },
        seed: config.seed,
        level: config.train.level,
        size: config.train.crop,
        frames: match stage {
            Stage::Pretrain => config.train.stage1_clip_len,
            Stage::Full => config.train.stage2_clip_len,
        },
    }
}

/// Held-out clips for evaluation, independent of the training streams.
pub fn eval_clips(config: &RunConfig) -> Result<Vec<SyntheticClip>> {
    let source = SceneSource::from_config(config)?;
    let recipe = ClipRecipe {
        config,
        purpose: "eval",
        seed: config.eval.seed,
        level: config.eval.level,
        size: config.eval.size,
        frames: config.eval.clip_len,
    };
    (0..config.eval.clips as u64)
        .map(|i| recipe.make(&source, i))
        .collect()
}

/// Training batch `step` of `stage`.
pub fn training_batch(
    config: &RunConfig,
    source: &SceneSource,
    stage: Stage,
    step: usize,
) -> Result<Vec<SyntheticClip>> {
    let recipe = train_recipe(config, stage);
    let b = config.train.batch;
    (0..b)
        .map(|i| recipe.make(source, (step * b + i) as u64))
        .collect()
}

/// 64-bit FNV-1a over the raw samples and clean frames of a batch.
pub fn batch_fingerprint(batch: &[SyntheticClip]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |t: &Tensor| {
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    };
    for clip in batch {
        clip.raw.iter().for_each(|r| feed(&r.cfa));
        clip.clean.iter().for_each(&mut feed);
    }
    h
}

fn fmt_component(value: f64, weight: f64) -> String {
    if weight > 0.0 {
        format!("{value:e}")
    } else {
        "-".into()
    }
}

/// One log line; components that do not enter the objective print as `-`.
pub fn format_step(stage: Stage, log: &StepLog, weights: &LossWeights) -> String {
    let l = &log.loss;
    format!(
        "stage={} step={} lr={:e} L_r={:e} L_p={} L_dtc={} L_dtc_long={} L_rpc={} total={:e} grad_norm={:e}",
        stage.name(),
        log.step,
        log.lr,
        l.r,
        fmt_component(l.p, weights.perceptual),
        fmt_component(l.dtc, weights.dtc),
        fmt_component(l.dtc_long, weights.dtc_long),
        fmt_component(l.rpc, weights.rpc),
        l.total,
        log.grad_norm
    )
}

/// How a stage starts.
#[derive(Clone, Debug, Default)]
pub struct StageStart<'a> {
    /// A checkpoint of an earlier stage to fine-tune, or of the same stage to resume.
    pub from: Option<&'a Checkpoint>,
    /// Permit the full stage without a pretrained checkpoint.
    pub allow_scratch: bool,
    /// Where periodic and final checkpoints go.
    pub checkpoint_dir: Option<&'a Path>,
}

/// Stage objective: reconstruction only for pretraining, the configured
/// weights afterwards.
pub fn stage_weights(config: &RunConfig, stage: Stage) -> LossWeights {
    match stage {
        Stage::Pretrain => LossWeights::RECONSTRUCTION,
        Stage::Full => config.weights,
    }
}

/// Run one training stage, writing one line per step to `log`.
pub fn train_stage(
    config: &RunConfig,
    stage: Stage,
    start: StageStart<'_>,
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    config.validate()?;
    let total = match stage {
        Stage::Pretrain => config.train.stage1_steps,
        Stage::Full => config.train.stage2_steps,
    };
    let (net, mut store, mut adam, first_step) = match start.from {
        Some(ck) if ck.stage == stage => {
            let (net, store) = ck.model()?;
            (net, store, ck.adam.clone(), ck.step)
        }
        Some(ck) if ck.stage < stage => {
            let (net, store) = ck.model()?;
            let adam = Adam::new(&store);
            (net, store, adam, 0)
        }
        Some(ck) => {
            return Err(Error::Config(format!(
                "cannot run the {} stage from a {} checkpoint",
                stage.name(),
                ck.stage.name()
            )))
        }
        None => {
            if stage == Stage::Full && !start.allow_scratch {
                return Err(Error::Config(
                    "the full stage needs a pretrained checkpoint (or allow_scratch)".into(),
                ));
            }
            let (net, store) = init_model(config)?;
            let adam = Adam::new(&store);
            (net, store, adam, 0)
        }
    };
    let source = SceneSource::from_config(config)?;
    let phi = ConvFeatures::default();
    let weights = stage_weights(config, stage);
    let objective = ClipObjective {
        weights,
        long_gap: config.long_gap,
        eps: config.eps,
        evaluate_all: false,
    };
    let schedule = CosineSchedule::new(config.train.lr, config.train.lr_floor, total)?;
    let save = |store: &ParamStore, adam: &Adam, step: usize, name: &str| -> Result<()> {
        if let Some(dir) = start.checkpoint_dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            Checkpoint::new(stage, step, config.clone(), store.clone(), adam.clone())
                .save(&dir.join(name))?;
        }
        Ok(())
    };
    for step in first_step..total {
        let batch = training_batch(config, &source, stage, step)?;
        let mut trainer = Trainer {
            net: &net,
            store: &mut store,
            adam: &mut adam,
            schedule,
            objective,
            phi: &phi,
            isp: IspParams::default(),
        };
        let record = match trainer.step(step, &batch) {
            Ok(r) => r,
            Err(e) => {
                save(&store, &adam, step, "last_good.ckpt")?;
                writeln!(log, "stage={} step={step} halted: {e}", stage.name())
                    .map_err(io_err("log"))?;
                return Err(e.into());
            }
        };
        writeln!(log, "{}", format_step(stage, &record, &weights)).map_err(io_err("log"))?;
        let every = config.train.checkpoint_every;
        if every > 0 && (step + 1) % every == 0 && step + 1 < total {
            save(
                &store,
                &adam,
                step + 1,
                &format!("{}-{:06}.ckpt", stage.name(), step + 1),
            )?;
        }
    }
    save(&store, &adam, total, &format!("{}.ckpt", stage.name()))?;
    Ok(Checkpoint::new(stage, total, config.clone(), store, adam))
}

/// Both stages back to back.
pub fn train(
    config: &RunConfig,
    checkpoint_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    let start = StageStart {
        checkpoint_dir,
        ..StageStart::default()
    };
    let pre = train_stage(config, Stage::Pretrain, start.clone(), log)?;
    train_stage(
        config,
        Stage::Full,
        StageStart {
            from: Some(&pre),
            ..start
        },
        log,
    )
}

/// Per-clip metrics under one method.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipEval {
    pub id: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub level: NoiseLevel,
    pub clips: Vec<ClipEval>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    pub fn mean_psnr(&self) -> Option<f64> {
        mean_of(self.clips.iter().map(|c| c.report.mean_psnr()))
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        mean_of(self.clips.iter().map(|c| c.report.mean_ssim()))
    }

    pub fn mean_we(&self) -> Option<f64> {
        mean_of(self.clips.iter().map(|c| c.report.mean_we()))
    }

    pub fn mean_tof(&self) -> Option<f64> {
        mean_of(self.clips.iter().map(|c| c.report.mean_tof()))
    }

    pub fn mean_rwe(&self) -> Option<f64> {
        mean_of(self.clips.iter().map(|c| c.report.mean_rwe()))
    }
}

pub fn metric_options(config: &RunConfig) -> MetricOptions {
    MetricOptions {
        flow_source: config.eval.flow_source,
        ..MetricOptions::default()
    }
}

/// Score already restored clips against their clean frames.
pub fn evaluate_restored(
    method: &str,
    config: &RunConfig,
    clips: &[SyntheticClip],
    restored: &[Vec<Tensor>],
) -> Result<EvalReport> {
    let opts = metric_options(config);
    let clips = clips
        .iter()
        .zip(restored)
        .enumerate()
        .map(|(i, (c, r))| {
            Ok(ClipEval {
                id: format!("eval-{i}"),
                report: evaluate_clip(r, &c.clean, &opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        method: method.into(),
        level: config.eval.level,
        clips,
    })
}

pub fn restore_clips(
    net: &Network,
    store: &ParamStore,
    clips: &[SyntheticClip],
) -> Result<Vec<Vec<Tensor>>> {
    clips
        .iter()
        .map(|c| Ok(net.run_clip(store, &c.raw)?))
        .collect()
}

/// Restore and score the held-out clips with a trained model.
pub fn evaluate(checkpoint: &Checkpoint, clips: &[SyntheticClip]) -> Result<EvalReport> {
    let (net, store) = checkpoint.model()?;
    let restored = restore_clips(&net, &store, clips)?;
    evaluate_restored("model", &checkpoint.config, clips, &restored)
}

pub fn evaluate_baseline(
    baseline: Baseline,
    config: &RunConfig,
    clips: &[SyntheticClip],
) -> Result<EvalReport> {
    let restored = clips
        .iter()
        .map(|c| Ok(baseline.restore_clip(&c.raw)?))
        .collect::<Result<Vec<_>>>()?;
    evaluate_restored(baseline.name(), config, clips, &restored)
}

/// Mean per-frame perceptual loss of restored clips, a proxy for perceptual quality.
pub fn perceptual_proxy(
    config: &RunConfig,
    clips: &[SyntheticClip],
    restored: &[Vec<Tensor>],
) -> Result<f64> {
    let phi = ConvFeatures::default();
    let isp = IspParams::default();
    let mut total = 0.0;
    let mut frames = 0;
    for (c, r) in clips.iter().zip(restored) {
        let mut g = Graph::new();
        let a: Vec<_> = r.iter().map(|t| g.constant(t.clone())).collect();
        let b: Vec<_> = c.clean.iter().map(|t| g.constant(t.clone())).collect();
        let v = loss_p(&mut g, &phi, &a, &b, &isp, config.eps)?;
        total += g.value(v).item();
        frames += r.len();
    }
    Ok(total / frames.max(1) as f64)
}

/// The compared variants, one per row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    WithoutTemporal,
    WithoutTemporalAndHidden,
    ShallowHidden,
    WithoutRpc,
    WithoutDtc,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::WithoutTemporal,
        Variant::WithoutTemporalAndHidden,
        Variant::ShallowHidden,
        Variant::WithoutRpc,
        Variant::WithoutDtc,
        Variant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::WithoutTemporal => "w/o L_t",
            Variant::WithoutTemporalAndHidden => "w/o L_t, w/o H_t",
            Variant::ShallowHidden => "w/ SH_t",
            Variant::WithoutRpc => "w/o L_RPC",
            Variant::WithoutDtc => "w/o L_DTC",
            Variant::Full => "full model",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.label() == s)
    }

    /// The run config of this variant derived from the full-model config.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::WithoutTemporal => c.weights = c.weights.without_temporal(),
            Variant::WithoutTemporalAndHidden => {
                c.weights = c.weights.without_temporal();
                c.model.hidden_mode = HiddenMode::Zero;
            }
            Variant::ShallowHidden => c.model.hidden_mode = HiddenMode::Shallow,
            Variant::WithoutRpc => c.weights.rpc = 0.0,
            Variant::WithoutDtc => {
                c.weights.dtc = 0.0;
                c.weights.dtc_long = 0.0;
            }
            Variant::Full => {}
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    pub perceptual: f64,
    /// Fingerprint of the first stage-2 training batch.
    pub first_batch: u64,
}

/// Train every variant under the same seeds and score it on the same
/// held-out clips. Variants with the same architecture share one pretrained
/// checkpoint.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[Variant],
    log: &mut dyn Write,
) -> Result<Vec<AblationRow>> {
    let clips = eval_clips(base)?;
    let source = SceneSource::from_config(base)?;
    let mut pretrained: Vec<(HiddenMode, Checkpoint)> = Vec::new();
    let mut rows = Vec::new();
    for &variant in variants {
        let config = variant.apply(base);
        writeln!(log, "variant={}", variant.label()).map_err(io_err("log"))?;
        let mode = config.model.hidden_mode;
        let pre = match pretrained.iter().find(|(m, _)| *m == mode) {
            Some((_, ck)) => ck.clone(),
            None => {
                let ck = train_stage(&config, Stage::Pretrain, StageStart::default(), log)?;
                pretrained.push((mode, ck.clone()));
                ck
            }
        };
        let mut pre = pre;
        pre.config = config.clone();
        let first_batch = batch_fingerprint(&training_batch(&config, &source, Stage::Full, 0)?);
        let full = train_stage(
            &config,
            Stage::Full,
            StageStart {
                from: Some(&pre),
                ..StageStart::default()
            },
            log,
        )?;
        let (net, store) = full.model()?;
        let restored = restore_clips(&net, &store, &clips)?;
        let mut report = evaluate_restored(variant.label(), &config, &clips, &restored)?;
        report.method = variant.label().into();
        rows.push(AblationRow {
            variant,
            perceptual: perceptual_proxy(&config, &clips, &restored)?,
            report,
            first_batch,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vjdd_core::rng::stream;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.feat_channels = 4;
        c.model.hidden_channels = 4;
        c.model.max_channels = 8;
        c.model.buffer = 3;
        c.train.batch = 1;
        c.train.stage1_clip_len = 3;
        c.train.stage2_clip_len = 3;
        c.train.stage1_steps = 3;
        c.train.stage2_steps = 2;
        c.long_gap = 2;
        c.eval.clips = 1;
        c.eval.clip_len = 3;
        c
    }

    #[test]
    fn noise_draws_stay_in_range_and_repeat() {
        let ranges = NoiseRanges::default();
        let mut rng = stream(3, "noise");
        for _ in 0..10_000 {
            let p = sample_noise_params(&mut rng, &ranges);
            assert!((1e-4..=1e-2).contains(&p.sigma_s));
            assert!((1e-3..=0.031623).contains(&p.sigma_r));
        }
        let a = sample_noise_params(&mut stream(9, "n"), &ranges);
        let b = sample_noise_params(&mut stream(9, "n"), &ranges);
        assert_eq!(a, b);
        let linear = NoiseRanges {
            sampling: Sampling::Linear,
            ..ranges
        };
        let mut rng = stream(4, "noise");
        let mean = (0..20_000)
            .map(|_| sample_noise_params(&mut rng, &linear).sigma_s)
            .sum::<f64>()
            / 20_000.0;
        assert!((mean - 0.5 * (1e-4 + 1e-2)).abs() < 2e-4);
    }

    #[test]
    fn batches_are_reproducible_and_distinct() {
        let c = tiny();
        let src = SceneSource::Procedural;
        let a = training_batch(&c, &src, Stage::Pretrain, 5).unwrap();
        let b = training_batch(&c, &src, Stage::Pretrain, 5).unwrap();
        let other = training_batch(&c, &src, Stage::Pretrain, 6).unwrap();
        assert_eq!(batch_fingerprint(&a), batch_fingerprint(&b));
        assert_ne!(batch_fingerprint(&a), batch_fingerprint(&other));
        assert_eq!(a[0].len(), 3);
        assert_eq!(a[0].clean[0].height(), 32);
    }

    #[test]
    fn stage_one_logs_reconstruction_only_and_resumes_exactly() {
        let c = tiny();
        let mut log = Vec::new();
        let done = train_stage(&c, Stage::Pretrain, StageStart::default(), &mut log).unwrap();
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text
            .lines()
            .all(|l| l.contains("L_p=- L_dtc=- L_dtc_long=- L_rpc=-")));

        let mut short = c.clone();
        short.train.stage1_steps = 3;
        let dir = tempfile::tempdir().unwrap();
        short.train.checkpoint_every = 2;
        let mut log2 = Vec::new();
        train_stage(
            &short,
            Stage::Pretrain,
            StageStart {
                checkpoint_dir: Some(dir.path()),
                ..StageStart::default()
            },
            &mut log2,
        )
        .unwrap();
        let mid = Checkpoint::load(&dir.path().join("pretrain-000002.ckpt")).unwrap();
        let mut log3 = Vec::new();
        let resumed = train_stage(
            &short,
            Stage::Pretrain,
            StageStart {
                from: Some(&mid),
                ..StageStart::default()
            },
            &mut log3,
        )
        .unwrap();
        assert_eq!(resumed.params, done.params);
        assert_eq!(
            String::from_utf8(log3).unwrap().lines().next(),
            text.lines().nth(2)
        );
    }

    #[test]
    fn full_stage_requires_pretraining() {
        let c = tiny();
        let mut log = Vec::new();
        assert!(matches!(
            train_stage(&c, Stage::Full, StageStart::default(), &mut log),
            Err(Error::Config(_))
        ));
        let ck = train_stage(
            &c,
            Stage::Full,
            StageStart {
                allow_scratch: true,
                ..StageStart::default()
            },
            &mut log,
        )
        .unwrap();
        assert_eq!(ck.stage, Stage::Full);
        let text = String::from_utf8(log).unwrap();
        assert!(text.lines().all(|l| !l.contains("L_dtc=-")));
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let c = tiny();
        let clips = eval_clips(&c).unwrap();
        let restored: Vec<Vec<Tensor>> = clips.iter().map(|k| k.clean.clone()).collect();
        let r = evaluate_restored("gt", &c, &clips, &restored).unwrap();
        assert_eq!(r.mean_psnr(), Some(f64::INFINITY));
        assert_eq!(r.mean_rwe(), Some(0.0));
        assert_eq!(r.mean_we(), r.clips[0].report.mean_we());
        assert!(evaluate_baseline(Baseline::Bilinear, &c, &clips)
            .unwrap()
            .mean_psnr()
            .unwrap()
            .is_finite());
    }

    #[test]
    fn variants_share_data_and_differ_in_config() {
        let base = tiny();
        let labels: Vec<&str> = Variant::ALL.iter().map(|v| v.label()).collect();
        assert_eq!(
            labels,
            [
                "w/o L_t",
                "w/o L_t, w/o H_t",
                "w/ SH_t",
                "w/o L_RPC",
                "w/o L_DTC",
                "full model"
            ]
        );
        let src = SceneSource::Procedural;
        let prints: Vec<u64> = Variant::ALL
            .iter()
            .map(|v| {
                batch_fingerprint(&training_batch(&v.apply(&base), &src, Stage::Full, 0).unwrap())
            })
            .collect();
        assert!(prints.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(
            Variant::WithoutTemporal.apply(&base).weights.perceptual,
            0.002
        );
        assert_eq!(Variant::WithoutDtc.apply(&base).weights.rpc, 0.001);
        assert_eq!(Variant::from_label("w/ SH_t"), Some(Variant::ShallowHidden));
    }
}

//! Run configuration as flat `key = value` text with dotted section names.
//!
//! Blank lines and `#` comments are ignored, unknown keys are errors, and
//! every missing key takes its default. [`RunConfig::to_text`] writes every
//! key, so the output doubles as a complete run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use vjdd_core::degrade::NoiseParams;
use vjdd_core::flowmetrics::FlowSource;
use vjdd_core::losses::{LossWeights, CHARBONNIER_EPS, DEFAULT_LONG_GAP};
use vjdd_core::motion::FlowSynthParams;
use vjdd_core::net::{HiddenMode, NetConfig};
use vjdd_core::optim::CosineSchedule;

use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sampling {
    /// Uniform in `log10 σ`.
    #[default]
    Log,
    Linear,
}

/// Noise used for a set of clips.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseLevel {
    Low,
    High,
    /// Drawn per clip from the configured ranges.
    Sampled,
}

impl NoiseLevel {
    pub fn name(self) -> &'static str {
        match self {
            NoiseLevel::Low => "low",
            NoiseLevel::High => "high",
            NoiseLevel::Sampled => "sampled",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "low" => Some(NoiseLevel::Low),
            "high" => Some(NoiseLevel::High),
            "sampled" => Some(NoiseLevel::Sampled),
            _ => None,
        }
    }

    /// Fixed parameters, or `None` when sampled.
    pub fn params(self) -> Option<NoiseParams> {
        match self {
            NoiseLevel::Low => Some(NoiseParams::LOW),
            NoiseLevel::High => Some(NoiseParams::HIGH),
            NoiseLevel::Sampled => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseRanges {
    pub sigma_s: (f64, f64),
    pub sigma_r: (f64, f64),
    pub sampling: Sampling,
}

impl Default for NoiseRanges {
    fn default() -> Self {
        Self {
            sigma_s: (1e-4, 1e-2),
            sigma_r: (1e-3, 10f64.powf(-1.5)),
            sampling: Sampling::Log,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_floor: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch: usize,
    pub stage1_clip_len: usize,
    pub stage2_clip_len: usize,
    /// Training crop side in pixels.
    pub crop: usize,
    /// Extra border rendered around each crop so motion reveals real content.
    pub margin: usize,
    pub level: NoiseLevel,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: CosineSchedule::DEFAULT_INITIAL,
            lr_floor: CosineSchedule::DEFAULT_FLOOR,
            stage1_steps: 2000,
            stage2_steps: 2000,
            batch: 4,
            stage1_clip_len: 8,
            stage2_clip_len: 8,
            crop: 32,
            margin: 8,
            level: NoiseLevel::Sampled,
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub level: NoiseLevel,
    pub clips: usize,
    pub clip_len: usize,
    pub size: usize,
    pub seed: u64,
    pub flow_source: FlowSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            level: NoiseLevel::Low,
            clips: 4,
            clip_len: 8,
            size: 32,
            seed: 1_000_003,
            flow_source: FlowSource::Reference,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory of clean clips; `None` renders procedural scenes.
    pub data: Option<PathBuf>,
    pub noise: NoiseRanges,
    pub weights: LossWeights,
    pub eps: f64,
    pub long_gap: usize,
    pub model: NetConfig,
    pub train: TrainConfig,
    pub motion: FlowSynthParams,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            noise: NoiseRanges::default(),
            weights: LossWeights::FULL,
            eps: CHARBONNIER_EPS,
            long_gap: DEFAULT_LONG_GAP,
            model: NetConfig {
                feat_channels: 8,
                hidden_channels: 16,
                max_channels: 32,
                ..NetConfig::default()
            },
            train: TrainConfig::default(),
            motion: FlowSynthParams {
                max_translation: 2.0,
                max_rotation_deg: 1.0,
                max_scale_delta: 0.01,
            },
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {v:?}"
        ))),
    }
}

fn flow_source_name(s: FlowSource) -> &'static str {
    match s {
        FlowSource::Reference => "reference",
        FlowSource::Restored => "restored",
    }
}

impl RunConfig {
    /// Parse config text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            c.set(key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.source" => {
                self.data = if v == "synthetic" {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "noise.sigma_s_min" => self.noise.sigma_s.0 = parse(key, v)?,
            "noise.sigma_s_max" => self.noise.sigma_s.1 = parse(key, v)?,
            "noise.sigma_r_min" => self.noise.sigma_r.0 = parse(key, v)?,
            "noise.sigma_r_max" => self.noise.sigma_r.1 = parse(key, v)?,
            "noise.sampling" => {
                self.noise.sampling = match v {
                    "log" => Sampling::Log,
                    "linear" => Sampling::Linear,
                    _ => return Err(Error::Config(format!("{key}: expected log or linear"))),
                }
            }
            "loss.lambda" => self.weights.perceptual = parse(key, v)?,
            "loss.alpha" => self.weights.dtc = parse(key, v)?,
            "loss.beta" => self.weights.dtc_long = parse(key, v)?,
            "loss.gamma" => self.weights.rpc = parse(key, v)?,
            "loss.eps" => self.eps = parse(key, v)?,
            "loss.long_gap" => self.long_gap = parse(key, v)?,
            "model.feat_channels" => self.model.feat_channels = parse(key, v)?,
            "model.hidden_channels" => self.model.hidden_channels = parse(key, v)?,
            "model.max_channels" => self.model.max_channels = parse(key, v)?,
            "model.buffer" => self.model.buffer = parse(key, v)?,
            "model.f_max" => self.model.f_max = parse(key, v)?,
            "model.hidden" => {
                self.model.hidden_mode = HiddenMode::from_name(v).ok_or_else(|| {
                    Error::Config(format!("{key}: expected recurrent, zero or shallow"))
                })?
            }
            "model.align_hidden" => self.model.align_hidden = parse_bool(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.lr_floor" => self.train.lr_floor = parse(key, v)?,
            "train.stage1_steps" => self.train.stage1_steps = parse(key, v)?,
            "train.stage2_steps" => self.train.stage2_steps = parse(key, v)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.clip_len" => {
                let n = parse(key, v)?;
                self.train.stage1_clip_len = n;
                self.train.stage2_clip_len = n;
            }
            "train.stage1_clip_len" => self.train.stage1_clip_len = parse(key, v)?,
            "train.stage2_clip_len" => self.train.stage2_clip_len = parse(key, v)?,
            "train.crop" => self.train.crop = parse(key, v)?,
            "train.margin" => self.train.margin = parse(key, v)?,
            "train.level" => self.train.level = level(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "motion.max_translation" => self.motion.max_translation = parse(key, v)?,
            "motion.max_rotation_deg" => self.motion.max_rotation_deg = parse(key, v)?,
            "motion.max_scale_delta" => self.motion.max_scale_delta = parse(key, v)?,
            "eval.level" => self.eval.level = level(key, v)?,
            "eval.clips" => self.eval.clips = parse(key, v)?,
            "eval.clip_len" => self.eval.clip_len = parse(key, v)?,
            "eval.size" => self.eval.size = parse(key, v)?,
            "eval.seed" => self.eval.seed = parse(key, v)?,
            "eval.flow_source" => {
                self.eval.flow_source = match v {
                    "reference" => FlowSource::Reference,
                    "restored" => FlowSource::Restored,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected reference or restored"
                        )))
                    }
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, w) in self.weights.named() {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!(
                    "loss weight {name} must be finite and >= 0, got {w}"
                ));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("loss.eps must be positive, got {}", self.eps));
        }
        if self.model.buffer == 0 || self.model.buffer % 2 == 0 {
            return bad(format!(
                "model.buffer must be odd and >= 1, got {}",
                self.model.buffer
            ));
        }
        if self.long_gap < 2 {
            return bad(format!("loss.long_gap must be >= 2, got {}", self.long_gap));
        }
        for (name, (lo, hi)) in [
            ("sigma_s", self.noise.sigma_s),
            ("sigma_r", self.noise.sigma_r),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!(
                    "noise.{name} range needs 0 < min <= max, got [{lo}, {hi}]"
                ));
            }
        }
        if !(self.train.lr > 0.0 && (0.0..=self.train.lr).contains(&self.train.lr_floor)) {
            return bad(format!(
                "train.lr_floor must lie in [0, train.lr], got {} and {}",
                self.train.lr_floor, self.train.lr
            ));
        }
        let shortest = self
            .train
            .stage1_clip_len
            .min(self.train.stage2_clip_len)
            .min(self.eval.clip_len);
        if self.train.batch == 0 || shortest < 2 {
            return bad("train.batch must be >= 1 and clip lengths >= 2".into());
        }
        let multiple = 2 * vjdd_core::net::SIZE_MULTIPLE;
        for (name, size) in [
            ("train.crop", self.train.crop),
            ("eval.size", self.eval.size),
        ] {
            if size == 0 || size % multiple != 0 {
                return bad(format!(
                    "{name} must be a positive multiple of {multiple}, got {size}"
                ));
            }
        }
        if self.train.margin % 2 != 0 {
            return bad(format!(
                "train.margin must be even, got {}",
                self.train.margin
            ));
        }
        if self.eval.level == NoiseLevel::Sampled {
            return bad("eval.level must be low or high".into());
        }
        self.model
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            writeln!(s, "{k} = {v}").unwrap();
        };
        kv("seed", self.seed.to_string());
        kv(
            "data.source",
            self.data
                .as_ref()
                .map_or("synthetic".into(), |p| p.display().to_string()),
        );
        kv("noise.sigma_s_min", self.noise.sigma_s.0.to_string());
        kv("noise.sigma_s_max", self.noise.sigma_s.1.to_string());
        kv("noise.sigma_r_min", self.noise.sigma_r.0.to_string());
        kv("noise.sigma_r_max", self.noise.sigma_r.1.to_string());
        kv(
            "noise.sampling",
            match self.noise.sampling {
                Sampling::Log => "log",
                Sampling::Linear => "linear",
            }
            .into(),
        );
        kv("loss.lambda", self.weights.perceptual.to_string());
        kv("loss.alpha", self.weights.dtc.to_string());
        kv("loss.beta", self.weights.dtc_long.to_string());
        kv("loss.gamma", self.weights.rpc.to_string());
        kv("loss.eps", self.eps.to_string());
        kv("loss.long_gap", self.long_gap.to_string());
        kv("model.feat_channels", self.model.feat_channels.to_string());
        kv(
            "model.hidden_channels",
            self.model.hidden_channels.to_string(),
        );
        kv("model.max_channels", self.model.max_channels.to_string());
        kv("model.buffer", self.model.buffer.to_string());
        kv("model.f_max", self.model.f_max.to_string());
        kv("model.hidden", self.model.hidden_mode.name().into());
        kv("model.align_hidden", self.model.align_hidden.to_string());
        kv("train.lr", self.train.lr.to_string());
        kv("train.lr_floor", self.train.lr_floor.to_string());
        kv("train.stage1_steps", self.train.stage1_steps.to_string());
        kv("train.stage2_steps", self.train.stage2_steps.to_string());
        kv("train.batch", self.train.batch.to_string());
        kv(
            "train.stage1_clip_len",
            self.train.stage1_clip_len.to_string(),
        );
        kv(
            "train.stage2_clip_len",
            self.train.stage2_clip_len.to_string(),
        );
        kv("train.crop", self.train.crop.to_string());
        kv("train.margin", self.train.margin.to_string());
        kv("train.level", self.train.level.name().into());
        kv(
            "train.checkpoint_every",
            self.train.checkpoint_every.to_string(),
        );
        kv(
            "motion.max_translation",
            self.motion.max_translation.to_string(),
        );
        kv(
            "motion.max_rotation_deg",
            self.motion.max_rotation_deg.to_string(),
        );
        kv(
            "motion.max_scale_delta",
            self.motion.max_scale_delta.to_string(),
        );
        kv("eval.level", self.eval.level.name().into());
        kv("eval.clips", self.eval.clips.to_string());
        kv("eval.clip_len", self.eval.clip_len.to_string());
        kv("eval.size", self.eval.size.to_string());
        kv("eval.seed", self.eval.seed.to_string());
        kv(
            "eval.flow_source",
            flow_source_name(self.eval.flow_source).into(),
        );
        s
    }
}

fn level(key: &str, v: &str) -> Result<NoiseLevel> {
    NoiseLevel::from_name(v)
        .ok_or_else(|| Error::Config(format!("{key}: expected low, high or sampled")))
}

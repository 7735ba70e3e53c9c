use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vjdd::checkpoint::Checkpoint;
use vjdd::clip::{load_clip, load_raw_clip, save_clip_pngs, save_clip_tensor, save_raw_clip};
use vjdd::config::{NoiseLevel, RunConfig};
use vjdd::error::{io_err, Error, Result};
use vjdd::harness::{
    eval_clips, evaluate_baseline, evaluate_restored, metric_options, restore_clips, run_ablation,
    train_stage, ClipRecipe, SceneSource, StageStart, Variant,
};
use vjdd::report::{
    ablation_table, comparison_table, read_json, write_heatmaps, write_json, AblationSummary,
    MethodSummary,
};
use vjdd::tensorfile::{save_tensor, PortableTensor};
use vjdd_core::baseline::Baseline;
use vjdd_core::degrade::{degrade_frame, BayerPattern};
use vjdd_core::rng::indexed_stream;
use vjdd_core::train::Stage;

/// Joint video denoising and demosaicking on synthetic raw clips.
#[derive(Parser)]
#[command(name = "vjdd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.batch=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic clips with known motion: clean frames, flows and raw frames.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// low, high or sampled
        #[arg(long, default_value = "low")]
        level: String,
    },
    /// Mosaic and add noise to a clean clip.
    Degrade {
        /// Directory of PNG frames or a clip tensor file.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "low")]
        level: String,
        #[arg(long, default_value = "rggb")]
        pattern: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one stage or both; writes a manifest, a log and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// pretrain, full or both
        #[arg(long, default_value = "both")]
        stage: String,
        /// Checkpoint to fine-tune or resume from.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Run the full stage without a pretrained checkpoint.
        #[arg(long)]
        allow_scratch: bool,
    },
    /// Restore a raw clip written by `degrade` or `synth`.
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding `raw.vjdt` and `raw.meta`.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint and the baselines on held-out synthetic clips.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write WE and RWE heatmaps of the first clip.
        #[arg(long)]
        heatmaps: bool,
    },
    /// Print a table from report files written by `eval` or `ablate`.
    Report { files: Vec<PathBuf> },
    /// Train and score the ablation variants under shared seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Variant labels to run; all when omitted.
        #[arg(long)]
        variant: Vec<String>,
    },
}

fn level(name: &str) -> Result<NoiseLevel> {
    NoiseLevel::from_name(name)
        .ok_or_else(|| Error::Config(format!("unknown noise level {name:?}")))
}

fn fixed_level(name: &str) -> Result<NoiseLevel> {
    let l = level(name)?;
    if l.params().is_none() {
        return Err(Error::Config("a fixed noise level is required here".into()));
    }
    Ok(l)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn open_log(path: &Path) -> Result<io::BufWriter<fs::File>> {
    Ok(io::BufWriter::new(
        fs::File::create(path).map_err(io_err(path))?,
    ))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            cfg,
            out,
            count,
            frames,
            size,
            level: lvl,
        } => {
            let config = cfg.load()?;
            let source = SceneSource::from_config(&config)?;
            let recipe = ClipRecipe {
                config: &config,
                purpose: "synth",
                seed: config.seed,
                level: level(&lvl)?,
                size,
                frames,
            };
            for i in 0..count {
                let clip = recipe.make(&source, i as u64)?;
                let dir = out.join(format!("clip_{i:04}"));
                save_clip_pngs(&clip.clean, &dir.join("clean"))?;
                save_clip_tensor(&clip.clean, &dir.join("clean.vjdt"))?;
                let flows: Vec<_> = clip.step_flows.iter().map(|f| f.tensor().clone()).collect();
                save_tensor(&PortableTensor::stack(&flows)?, &dir.join("flows.vjdt"))?;
                save_raw_clip(&clip.raw, &dir)?;
            }
            write_text(&out.join("manifest.cfg"), &config.to_text())?;
            println!("wrote {count} clips to {}", out.display());
        }
        Command::Degrade {
            input,
            out,
            level: lvl,
            pattern,
            seed,
        } => {
            let clip = load_clip(&input)?;
            let params = fixed_level(&lvl)?.params().expect("fixed level");
            let pattern = BayerPattern::from_name(&pattern)
                .ok_or_else(|| Error::Config(format!("unknown Bayer pattern {pattern:?}")))?;
            let raws = clip
                .frames
                .iter()
                .enumerate()
                .map(|(t, f)| {
                    Ok(degrade_frame(
                        f,
                        params,
                        pattern,
                        &mut indexed_stream(seed, "degrade", t as u64),
                    )?)
                })
                .collect::<Result<Vec<_>>>()?;
            save_raw_clip(&raws, &out)?;
            println!("wrote {} raw frames to {}", raws.len(), out.display());
        }
        Command::Train {
            cfg,
            out,
            stage,
            from,
            allow_scratch,
        } => {
            let config = cfg.load()?;
            create_dir(&out)?;
            write_text(&out.join("manifest.cfg"), &config.to_text())?;
            let mut log = open_log(&out.join("train.log"))?;
            let from = from.as_deref().map(Checkpoint::load).transpose()?;
            let ckpt_dir = out.join("checkpoints");
            let start = |from| StageStart {
                from,
                allow_scratch,
                checkpoint_dir: Some(&ckpt_dir),
            };
            let last = match stage.as_str() {
                "both" => {
                    let pre =
                        train_stage(&config, Stage::Pretrain, start(from.as_ref()), &mut log)?;
                    train_stage(&config, Stage::Full, start(Some(&pre)), &mut log)?
                }
                s => {
                    let s = Stage::from_name(s)
                        .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))?;
                    train_stage(&config, s, start(from.as_ref()), &mut log)?
                }
            };
            log.flush().map_err(io_err(&out))?;
            println!(
                "finished {} stage after {} steps; checkpoints in {}",
                last.stage.name(),
                last.step,
                ckpt_dir.display()
            );
        }
        Command::Restore {
            checkpoint,
            input,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (net, store) = ck.model()?;
            let raws = load_raw_clip(&input)?;
            let restored = net.run_clip(&store, &raws)?;
            save_clip_pngs(&restored, &out)?;
            save_clip_tensor(&restored, &out.join("restored.vjdt"))?;
            println!("restored {} frames to {}", restored.len(), out.display());
        }
        Command::Eval {
            cfg,
            checkpoint,
            out,
            heatmaps,
        } => {
            let mut config = cfg.load()?;
            let ck = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            if let Some(ck) = &ck {
                let eval = config.eval;
                config = ck.config.clone();
                config.eval = eval;
            }
            create_dir(&out)?;
            write_text(&out.join("manifest.cfg"), &config.to_text())?;
            let clips = eval_clips(&config)?;
            let mut summaries = Vec::new();
            for b in [Baseline::Bilinear, Baseline::BilinearBilateral] {
                let r = evaluate_baseline(b, &config, &clips)?;
                summaries.push(MethodSummary::from_report(&r));
            }
            if let Some(ck) = &ck {
                let (net, store) = ck.model()?;
                let restored = restore_clips(&net, &store, &clips)?;
                let r = evaluate_restored("model", &config, &clips, &restored)?;
                summaries.push(MethodSummary::from_report(&r));
                if heatmaps {
                    write_heatmaps(
                        &restored[0],
                        &clips[0].clean,
                        &metric_options(&config),
                        &out.join("heatmaps"),
                    )?;
                }
            }
            for s in &summaries {
                write_json(s, &out.join(format!("{}.json", s.method)))?;
            }
            let table = comparison_table(&summaries);
            write_text(&out.join("table.txt"), &table)?;
            print!("{table}");
        }
        Command::Report { files } => {
            let mut methods = Vec::new();
            let mut ablations = Vec::new();
            for f in &files {
                match read_json::<MethodSummary>(f) {
                    Ok(m) => methods.push(m),
                    Err(_) => ablations.extend(read_json::<Vec<AblationSummary>>(f)?),
                }
            }
            if !methods.is_empty() {
                print!("{}", comparison_table(&methods));
            }
            if !ablations.is_empty() {
                print!("{}", ablation_table(&ablations));
            }
        }
        Command::Ablate { cfg, out, variant } => {
            let config = cfg.load()?;
            let variants = if variant.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variant
                    .iter()
                    .map(|v| {
                        Variant::from_label(v)
                            .ok_or_else(|| Error::Config(format!("unknown variant {v:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            create_dir(&out)?;
            write_text(&out.join("manifest.cfg"), &config.to_text())?;
            let mut log = open_log(&out.join("ablation.log"))?;
            let rows = run_ablation(&config, &variants, &mut log)?;
            log.flush().map_err(io_err(&out))?;
            let summaries: Vec<AblationSummary> =
                rows.iter().map(AblationSummary::from_row).collect();
            write_json(&summaries, &out.join("ablation.json"))?;
            let table = ablation_table(&summaries);
            write_text(&out.join("table.txt"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use lalab_core::anchoring::AnchorMode;
use lalab_core::harness::{
    self, check_drift_reduction, check_probe, check_sweep, compare_records, eval_video, probe_records, record_log,
    run_probe, sweep_distance, sweep_records, Arm, Check, EvalMeta, FileRef, Protocol, RolloutManifest, RolloutRun,
};
use lalab_core::model::Denoiser;
use lalab_core::rollout::{generate_long, Subject};
use lalab_core::synthworld::{build_dataset, synth_audio_at, DatasetSpec, RenderConfig, VideoClip};
use lalab_core::tensorio::{load_tensor, save_tensor};
use lalab_core::training::{train_or_reuse, TrainConfig};

const EXIT_INVALID_CONFIG: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "lalab", version, about = "Lookahead anchoring lab on a synthetic sprite world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        frames: usize,
        /// Output directory; defaults to $LALAB_DATA_DIR.
        #[arg(long, env = "LALAB_DATA_DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a denoiser from a TOML config (reuses a matching checkpoint).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset used when the config has no `dataset_dir`.
        #[arg(long, env = "LALAB_DATA_DIR")]
        data: Option<PathBuf>,
        /// Overrides the config's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate one long video.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-frame probe: motion against condition-frame gap.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        gaps: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        check: bool,
    },
    /// Self-keyframed rollouts over a list of lookahead distances.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "d", value_delimiter = ',', default_value = "4,8,12,16,24,40,80")]
        distances: Vec<i64>,
        /// Protocol TOML; defaults to 10 identities x 3 seeds x 10 segments.
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        check: bool,
    },
    /// Compare anchoring modes, one checkpoint per mode.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        check: bool,
    },
    /// Score a video against its metadata.
    Eval {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plots and summary from an experiment directory's metric logs.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Deserialize)]
struct CompareConfig {
    /// Mode name to checkpoint path.
    checkpoints: BTreeMap<String, PathBuf>,
    #[serde(default)]
    protocol: Option<Protocol>,
}

struct CheckFailed;

impl std::fmt::Debug for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("acceptance check failed")
    }
}

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("acceptance check failed")
    }
}

impl std::error::Error for CheckFailed {}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| lalab_core::Error::InvalidConfig(format!("{}: {e}", path.display())).into())
}

fn report_checks(checks: &[Check], enforce: bool) -> Result<()> {
    for c in checks {
        println!("{c}");
    }
    if enforce && checks.iter().any(|c| !c.pass) {
        return Err(CheckFailed.into());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(Denoiser, lalab_core::model::CheckpointMeta)> {
    Denoiser::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn parse_mode(name: &str) -> Result<AnchorMode> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| lalab_core::Error::InvalidConfig(format!("unknown anchor mode `{name}`")).into())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { count, frames, out, seed } => {
            let manifest = build_dataset(&out, &DatasetSpec::new(count, frames, seed))?;
            println!("wrote {} clips to {}", manifest.clips.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let mut value: toml::Table = read_toml(&config)?;
            if !value.contains_key("dataset_dir") {
                let Some(data) = data else {
                    return Err(lalab_core::Error::InvalidConfig(
                        "no dataset_dir in config and LALAB_DATA_DIR is unset".into(),
                    )
                    .into());
                };
                value.insert("dataset_dir".into(), data.display().to_string().into());
            }
            if let Some(out) = out {
                value.insert("out_dir".into(), out.display().to_string().into());
            }
            let cfg: TrainConfig = value
                .try_into()
                .map_err(|e| lalab_core::Error::InvalidConfig(format!("{}: {e}", config.display())))?;
            let outcome = train_or_reuse(&cfg)?;
            println!(
                "{} {} ({} steps, final loss {:.5})",
                if outcome.reused { "reused" } else { "trained" },
                outcome.checkpoint.display(),
                cfg.steps,
                outcome.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Rollout { ckpt, config, out } => {
            let run: RolloutRun = read_toml(&config)?;
            run.rollout.validate()?;
            let (model, _) = load_model(&ckpt)?;
            let render = RenderConfig {
                height: model.config().frame_height,
                width: model.config().frame_width,
                ..RenderConfig::default()
            };
            let identity = run.identity();
            let rate = lalab_core::synthworld::DEFAULT_FRAME_RATE;
            let audio = synth_audio_at(run.rollout.total_frames(), run.audio_seed, rate)?;
            let output = generate_long(&run.rollout, &Subject::from_identity(&identity, &render), &audio, &model)?;
            fs::create_dir_all(&out)?;
            let video_path = out.join("video.bin");
            save_tensor(&video_path, &output.video.frames)?;
            let manifest = RolloutManifest {
                checkpoint: FileRef::of(&ckpt)?,
                video: FileRef::of(&video_path)?,
                config: run,
                identity,
                frame_rate: rate,
                audio: output.aligned_audio(&audio)?.samples,
                source_frames: output.source_frames.clone(),
                segments: output.segments.clone(),
            };
            fs::write(out.join("rollout.toml"), toml::to_string(&manifest)?)?;
            println!("wrote {} frames to {}", output.video.len(), video_path.display());
        }
        Command::Probe { ckpt, gaps, seeds, out, check } => {
            let (model, meta) = load_model(&ckpt)?;
            let rows = run_probe(&model, &meta, &gaps, seeds, 3_000_000)?;
            record_log(&out, harness::PROBE_LOG, &probe_records(&rows))?;
            report_checks(&[check_probe(&rows)], check)?;
        }
        Command::Sweep { ckpt, distances, protocol, out, check } => {
            let protocol = match protocol {
                Some(p) => read_toml(&p)?,
                None => Protocol::default(),
            };
            protocol.validate()?;
            let (model, meta) = load_model(&ckpt)?;
            let rows = sweep_distance(&model, &meta, &distances, &protocol)?;
            record_log(&out, harness::SWEEP_LOG, &sweep_records(&rows))?;
            report_checks(&check_sweep(&rows), check)?;
        }
        Command::Compare { config, out, check } => {
            let cfg: CompareConfig = read_toml(&config)?;
            let protocol = cfg.protocol.unwrap_or_default();
            protocol.validate()?;
            let mut loaded = Vec::new();
            for (name, path) in &cfg.checkpoints {
                let (model, meta) = load_model(path)?;
                loaded.push((parse_mode(name)?, model, meta));
            }
            let arms: Vec<Arm<'_>> = loaded.iter().map(|(mode, model, meta)| Arm { mode: *mode, model, meta }).collect();
            let rows = harness::compare_baselines(&arms, &protocol)?;
            record_log(&out, harness::COMPARE_LOG, &compare_records(&rows))?;
            for r in &rows {
                println!(
                    "{:>14} identity {:.4} sync {:.4} dynamic {:.6} drift_ratio {:.4}",
                    r.mode.name(),
                    r.identity_consistency,
                    r.sync_score,
                    r.dynamic_degree,
                    r.drift_ratio
                );
            }
            let find = |m: &[AnchorMode]| rows.iter().find(|r| m.contains(&r.mode));
            match (find(&[AnchorMode::SelfKeyframe, AnchorMode::Lookahead]), find(&[AnchorMode::None])) {
                (Some(la), Some(none)) => report_checks(&check_drift_reduction(&la.summary, &none.summary), check)?,
                _ if check => bail!(lalab_core::Error::InvalidConfig(
                    "--check needs a lookahead (or self_keyframe) and a none checkpoint".into()
                )),
                _ => {}
            }
        }
        Command::Eval { video, meta, out } => {
            let meta: EvalMeta = read_toml(&meta)?;
            let clip = VideoClip::new(load_tensor(&video)?, meta.frame_rate)?;
            let run = video.file_stem().map_or("video".into(), |s| s.to_string_lossy().into_owned());
            let records = eval_video(&run, &clip, &meta)?;
            lalab_core::metrics::write_metric_log(&out, &records)?;
            for r in records.iter().filter(|r| r.index < 0) {
                println!("{} = {:.5}", r.metric, r.value);
            }
        }
        Command::Report { dir } => {
            for f in harness::report(&dir)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<CheckFailed>() {
                return ExitCode::from(EXIT_CHECK_FAILED);
            }
            match e.downcast_ref::<lalab_core::Error>() {
                Some(lalab_core::Error::InvalidConfig(_)) => ExitCode::from(EXIT_INVALID_CONFIG),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

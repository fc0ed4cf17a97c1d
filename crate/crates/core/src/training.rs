//! Training loop with the ablation switches: anchor mode, fixed or flexible
//! anchor sampling and the anchor's temporal embedding.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchoring::{AnchorMode, AnchorSpec};
use crate::latentspace::{encode, LatentSequence, PeMode};
use crate::model::{loss, AnchorSampler, AnchorSampling, CheckpointMeta, ClipSample, Denoiser, ModelConfig};
use crate::synthworld::{load_dataset, read_manifest};
use crate::{Error, Result};

pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const LOSS_LOG: &str = "loss.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub anchor: AnchorSpec,
    #[serde(default = "default_sampling")]
    pub anchor_sampling: AnchorSampling,
    #[serde(default = "default_pe")]
    pub pe_mode: PeMode,
    pub dataset_dir: PathBuf,
    /// Intermediate checkpoint period in steps; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    /// Fraction of examples whose first latents are replaced by clean starting frames.
    #[serde(default = "default_starting_prob")]
    pub starting_prob: f64,
}

fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    3e-4
}
fn default_sampling() -> AnchorSampling {
    AnchorSampling::Flexible
}
fn default_pe() -> PeMode {
    PeMode::SinusoidalDistant
}
fn default_starting_prob() -> f64 {
    0.5
}

impl TrainConfig {
    pub fn new(dataset_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>, steps: usize) -> Self {
        Self {
            steps,
            batch: default_batch(),
            lr: default_lr(),
            seed: 0,
            anchor: AnchorSpec::default(),
            anchor_sampling: default_sampling(),
            pe_mode: default_pe(),
            dataset_dir: dataset_dir.into(),
            checkpoint_every: 0,
            out_dir: out_dir.into(),
            model: ModelConfig::default(),
            starting_prob: default_starting_prob(),
        }
    }

    /// Model configuration with the run's PE mode applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            pe_mode: self.pe_mode,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.batch == 0 {
            return fail("batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.starting_prob) {
            return fail(format!("starting_prob {} outside [0, 1]", self.starting_prob));
        }
        self.anchor.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        self.model_config().validate()?;
        if self.anchor_sampling == AnchorSampling::Fixed
            && matches!(self.anchor.mode, AnchorMode::Lookahead | AnchorMode::SelfKeyframe)
            && self.anchor.latent_distance(self.model.ratio)? < 1
        {
            return fail(format!(
                "fixed anchoring needs D >= r so that d >= 1 (D = {}, r = {})",
                self.anchor.lookahead, self.model.ratio
            ));
        }
        Ok(())
    }

    pub fn sampler(&self) -> Result<AnchorSampler> {
        let r = self.model.ratio;
        Ok(AnchorSampler {
            mode: self.anchor.mode,
            sampling: self.anchor_sampling,
            distance: self.anchor.latent_distance(r)?,
            d_max: self.anchor.d_max,
            past_latents: (-self.anchor.past_index(r)) as usize,
            starting_prob: self.starting_prob,
        })
    }

    /// Hash of everything that determines the trained weights: the config
    /// minus output paths, plus the dataset manifest.
    pub fn fingerprint(&self) -> Result<String> {
        let manifest = read_manifest(&self.dataset_dir)?;
        let mut value = serde_json::to_value(self)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("out_dir");
            obj.remove("dataset_dir");
            obj.remove("checkpoint_every");
            obj.insert("dataset".into(), serde_json::to_value(&manifest)?);
        }
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&value)?);
        Ok(hex::encode(h.finalize()))
    }
}

/// Cosine decay from `lr` to zero over `steps`.
pub fn cosine_lr(lr: f64, step: usize, steps: usize) -> f64 {
    if steps == 0 {
        return lr;
    }
    0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub losses: Vec<f64>,
    pub fingerprint: String,
    /// True when an existing checkpoint with the same fingerprint was reused.
    pub reused: bool,
}

/// Exponential moving average `m_t = (1 - alpha) m_{t-1} + alpha x_t`,
/// started at the first value.
pub fn ema(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut m = match values.first() {
        Some(&v) => v,
        None => return out,
    };
    for &v in values {
        m = (1.0 - alpha) * m + alpha * v;
        out.push(m);
    }
    out
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn load_latents(config: &TrainConfig, sampler: &AnchorSampler) -> Result<Vec<(LatentSequence, Vec<f32>)>> {
    let clips = load_dataset(&config.dataset_dir)?;
    if clips.is_empty() {
        return Err(Error::InvalidArgument("dataset has no clips".into()));
    }
    let r = config.model.ratio;
    let need = sampler.required_latents(config.model.latent_frames()) * r;
    let mut out = Vec::with_capacity(clips.len());
    for c in clips {
        if c.clip.len() < need {
            return Err(Error::InvalidArgument(format!(
                "clip {} has {} frames; {} training needs at least {need}",
                c.meta.clip_id,
                c.clip.len(),
                config.anchor.mode.name()
            )));
        }
        if c.clip.height() != config.model.frame_height || c.clip.width() != config.model.frame_width {
            return Err(Error::InvalidArgument(format!(
                "clip {} is {}x{}, model expects {}x{}",
                c.meta.clip_id,
                c.clip.height(),
                c.clip.width(),
                config.model.frame_height,
                config.model.frame_width
            )));
        }
        let lat = encode(&c.clip, r)?;
        out.push((lat, c.meta.audio));
    }
    Ok(out)
}

/// Trains from scratch and writes `model.ckpt` plus `loss.jsonl` under
/// `out_dir`. Deterministic for a fixed config.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let sampler = config.sampler()?;
    let data = load_latents(config, &sampler)?;
    let fingerprint = config.fingerprint()?;
    fs::create_dir_all(&config.out_dir)?;

    let model = Denoiser::new(config.model_config(), config.seed)?;
    let mut opt = AdamW::new(
        model.vars(),
        ParamsAdamW {
            lr: config.lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let log_path = config.out_dir.join(LOSS_LOG);
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let start = Instant::now();
    let mut losses = Vec::with_capacity(config.steps);
    let meta = |steps: usize| CheckpointMeta {
        trained_steps: steps,
        anchor_mode: Some(config.anchor.mode),
        info: serde_json::json!({
            "fingerprint": fingerprint,
            "anchor": config.anchor,
            "anchor_sampling": config.anchor_sampling,
            "seed": config.seed,
        }),
    };

    for step in 0..config.steps {
        let mut picks = Vec::with_capacity(config.batch);
        while picks.len() < config.batch {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picks.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<ClipSample<'_>> = picks
            .iter()
            .map(|&i| ClipSample {
                latents: &data[i].0,
                audio: &data[i].1,
            })
            .collect();
        let lr = cosine_lr(config.lr, step, config.steps);
        opt.set_learning_rate(lr);
        let l = loss(&model, &batch, &sampler, &mut rng)?;
        let value = l.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!("loss became {value} at step {step}")));
        }
        opt.backward_step(&l)?;
        losses.push(value);
        let record = LossRecord {
            step,
            loss: value,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < config.steps {
            model.save(&config.out_dir.join(format!("ckpt_{:06}.ckpt", step + 1)), &meta(step + 1))?;
        }
        if (step + 1) % 500 == 0 {
            log::info!("step {} loss {:.4}", step + 1, value);
        }
    }
    log.flush()?;
    let checkpoint = config.out_dir.join(FINAL_CHECKPOINT);
    model.save(&checkpoint, &meta(config.steps))?;
    Ok(TrainOutcome {
        checkpoint,
        loss_log: log_path,
        losses,
        fingerprint,
        reused: false,
    })
}

/// Like [`train`], but returns the existing checkpoint when its recorded
/// fingerprint matches the config.
pub fn train_or_reuse(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let fingerprint = config.fingerprint()?;
    let checkpoint = config.out_dir.join(FINAL_CHECKPOINT);
    let loss_log = config.out_dir.join(LOSS_LOG);
    if checkpoint.exists() && loss_log.exists() {
        if let Ok((_, meta)) = Denoiser::load(&checkpoint) {
            let same = meta.info.get("fingerprint").and_then(|v| v.as_str()) == Some(fingerprint.as_str());
            if same && meta.trained_steps == config.steps {
                let losses = read_loss_log(&loss_log)?.into_iter().map(|r| r.loss).collect();
                return Ok(TrainOutcome {
                    checkpoint,
                    loss_log,
                    losses,
                    fingerprint,
                    reused: true,
                });
            }
        }
    }
    train(config)
}

/// The five anchoring-strategy ablation rows. "flexible" and "distant_pe"
/// share one configuration and therefore one training run.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let with = |sampling: AnchorSampling, pe: PeMode, dir: &str| {
        let mut c = base.clone();
        c.anchor.mode = AnchorMode::SelfKeyframe;
        c.anchor_sampling = sampling;
        c.pe_mode = pe;
        c.out_dir = base.out_dir.join(dir);
        c
    };
    vec![
        ("fixed_anchor", with(AnchorSampling::Fixed, PeMode::SinusoidalDistant, "fixed")),
        ("flexible_anchor", with(AnchorSampling::Flexible, PeMode::SinusoidalDistant, "flexible")),
        ("no_time_pe", with(AnchorSampling::Flexible, PeMode::ZeroTime, "zero_pe")),
        ("learnable_time_pe", with(AnchorSampling::Flexible, PeMode::LearnableTime, "learnable_pe")),
        ("distant_time_pe", with(AnchorSampling::Flexible, PeMode::SinusoidalDistant, "flexible")),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub fingerprint: String,
    pub dataset: String,
    pub identity_consistency: f64,
    pub sync_score: f64,
    pub dynamic_degree: f64,
}

/// Trains (or reuses) every ablation variant and evaluates each on the same
/// rollout protocol.
pub fn run_ablation_suite(base: &TrainConfig, protocol: &crate::harness::Protocol) -> Result<Vec<AblationRow>> {
    let dataset = crate::harness::hash_file(&base.dataset_dir.join(crate::synthworld::MANIFEST_FILE))?;
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(base) {
        let outcome = train_or_reuse(&cfg)?;
        let (model, _) = Denoiser::load(&outcome.checkpoint)?;
        let summary = crate::harness::evaluate(&model, &cfg.anchor, protocol)?;
        rows.push(AblationRow {
            name: name.to_string(),
            fingerprint: outcome.fingerprint,
            dataset: dataset.clone(),
            identity_consistency: summary.identity_consistency,
            sync_score: summary.sync_score,
            dynamic_degree: summary.dynamic_degree,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 100), 1.0);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 100, 100).abs() < 1e-12);
        for s in 1..100 {
            assert!(cosine_lr(1.0, s, 100) <= cosine_lr(1.0, s - 1, 100));
        }
    }

    #[test]
    fn ema_tracks_constant() {
        assert_eq!(ema(&[2.0; 5], 0.01), vec![2.0; 5]);
        assert!(ema(&[], 0.5).is_empty());
        let e = ema(&[1.0, 0.0], 0.5);
        assert_eq!(e, vec![1.0, 0.5]);
    }

    #[test]
    fn ablation_has_five_rows_over_four_runs() {
        let base = TrainConfig::new("/data", "/runs", 10);
        let v = ablation_variants(&base);
        assert_eq!(v.len(), 5);
        let dirs: std::collections::BTreeSet<_> = v.iter().map(|(_, c)| c.out_dir.clone()).collect();
        assert_eq!(dirs.len(), 4);
        assert!(v.iter().all(|(_, c)| c.dataset_dir == base.dataset_dir && c.seed == base.seed));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = TrainConfig::new("/d", "/o", 5);
        c.model = ModelConfig::desk();
        let text = toml::to_string(&c).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(c, back);
        let minimal: TrainConfig = toml::from_str("steps = 3\ndataset_dir = \"d\"\nout_dir = \"o\"\n").unwrap();
        assert_eq!(minimal.batch, 8);
        assert_eq!(minimal.anchor_sampling, AnchorSampling::Flexible);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = TrainConfig::new("/d", "/o", 5);
        c.batch = 0;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = TrainConfig::new("/d", "/o", 5);
        c.model = ModelConfig::desk();
        c.anchor_sampling = AnchorSampling::Fixed;
        c.anchor.lookahead = 2;
        assert!(c.validate().is_err());
    }
}

//! On-disk datasets: one directory per clip holding `frames.bin` (raw tensor)
//! and `meta.toml` (identity, audio samples, seeds).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_clip_with, sample_identity, synth_audio_at, IdentityDescriptor, RenderConfig, VideoClip};
use crate::error::invalid;
use crate::tensorio::{load_tensor, save_tensor};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const FRAMES_FILE: &str = "frames.bin";
pub const META_FILE: &str = "meta.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub count: usize,
    pub frames: usize,
    pub seed: u64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: u32,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
}

fn default_frame_rate() -> u32 {
    super::DEFAULT_FRAME_RATE
}

fn default_side() -> usize {
    32
}

impl DatasetSpec {
    pub fn new(count: usize, frames: usize, seed: u64) -> Self {
        Self {
            count,
            frames,
            seed,
            frame_rate: default_frame_rate(),
            height: default_side(),
            width: default_side(),
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            height: self.height,
            width: self.width,
            ..RenderConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub clip_id: String,
    pub identity_seed: u64,
    pub audio_seed: u64,
    pub motion_seed: u64,
    pub frame_rate: u32,
    pub identity: IdentityDescriptor,
    pub audio: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub clips: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct DatasetClip {
    pub meta: ClipMeta,
    pub clip: VideoClip,
}

/// Per-clip seeds, drawn in order from the dataset seed.
fn clip_seeds(seed: u64, count: usize) -> Vec<(u64, u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (rng.next_u64() >> 1, rng.next_u64() >> 1, rng.next_u64() >> 1))
        .collect()
}

pub fn build_dataset(out: &Path, spec: &DatasetSpec) -> Result<DatasetManifest> {
    if spec.count == 0 || spec.frames == 0 {
        return Err(invalid("dataset needs count >= 1 and frames >= 1"));
    }
    fs::create_dir_all(out)?;
    let cfg = spec.render_config();
    let mut clips = Vec::with_capacity(spec.count);
    for (k, (id_seed, audio_seed, motion_seed)) in clip_seeds(spec.seed, spec.count).into_iter().enumerate() {
        let identity = sample_identity(id_seed);
        let audio = synth_audio_at(spec.frames, audio_seed, spec.frame_rate)?;
        let (clip, _) = render_clip_with(&identity, &audio, motion_seed, &cfg)?;
        let clip_id = format!("clip_{k:05}");
        let dir = out.join(&clip_id);
        fs::create_dir_all(&dir)?;
        save_tensor(&dir.join(FRAMES_FILE), &clip.frames)?;
        let meta = ClipMeta {
            clip_id: clip_id.clone(),
            identity_seed: id_seed,
            audio_seed,
            motion_seed,
            frame_rate: spec.frame_rate,
            identity,
            audio: audio.samples,
        };
        fs::write(dir.join(META_FILE), toml::to_string(&meta)?)?;
        clips.push(clip_id);
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        clips,
    };
    fs::write(out.join(MANIFEST_FILE), toml::to_string(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingInputs(vec![path]));
    }
    Ok(toml::from_str(&fs::read_to_string(path)?)?)
}

pub fn read_clip(dir: &Path) -> Result<DatasetClip> {
    let meta: ClipMeta = toml::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
    let frames = load_tensor(&dir.join(FRAMES_FILE))?;
    if frames.shape()[0] != meta.audio.len() {
        return Err(Error::Format {
            path: dir.join(META_FILE),
            reason: format!("{} audio samples for {} frames", meta.audio.len(), frames.shape()[0]),
        });
    }
    let clip = VideoClip::new(frames, meta.frame_rate)?;
    Ok(DatasetClip { meta, clip })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetClip>> {
    let manifest = read_manifest(dir)?;
    let missing: Vec<PathBuf> = manifest
        .clips
        .iter()
        .map(|c| dir.join(c))
        .filter(|p| !p.join(FRAMES_FILE).exists() || !p.join(META_FILE).exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingInputs(missing));
    }
    manifest.clips.iter().map(|c| read_clip(&dir.join(c))).collect()
}

//! Autoregressive inference: segment-wise Euler denoising with starting-frame
//! token replacement, anchor placement, narrative target swaps and the
//! two-frame distance probe.

use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anchoring::{assemble_sequence, plan_segments, Anchor, AnchorMode, AnchorSpec, SegmentPlan, TargetSource};
use crate::error::invalid;
use crate::latentspace::{decode, encode, frame_to_latent, unpatchify, LatentSequence, TokenSequence};
use crate::model::{from_model_space, to_model_space, DenoiseItem, Denoiser};
use crate::synthworld::{
    extract_keypoints, reference_frame, render_keyframe, AudioTrack, IdentityDescriptor, RenderConfig, VideoClip,
};
use crate::{Error, Result};

/// From segment `segment` onwards the anchor shows `identity`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NarrativeSwap {
    pub segment: usize,
    pub identity: IdentityDescriptor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub segments: usize,
    /// Segment length `L` in pixel frames.
    pub window: usize,
    #[serde(default = "default_steps")]
    pub denoise_steps: usize,
    #[serde(default)]
    pub anchor: AnchorSpec,
    #[serde(default)]
    pub narrative_schedule: Vec<NarrativeSwap>,
    #[serde(default)]
    pub seed: u64,
    /// Seed the first segment with the reference frame as starting frames.
    #[serde(default = "default_true")]
    pub seed_with_reference: bool,
    /// Half-width of the audio window averaged by oracle keyframes.
    #[serde(default = "default_keyframe_context")]
    pub keyframe_context: usize,
}

fn default_steps() -> usize {
    32
}
fn default_true() -> bool {
    true
}
fn default_keyframe_context() -> usize {
    2
}

impl RolloutConfig {
    pub fn new(segments: usize, window: usize, anchor: AnchorSpec) -> Self {
        Self {
            segments,
            window,
            denoise_steps: default_steps(),
            anchor,
            narrative_schedule: Vec::new(),
            seed: 0,
            seed_with_reference: true,
            keyframe_context: default_keyframe_context(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.segments == 0 {
            return fail("segments must be >= 1".into());
        }
        if self.denoise_steps == 0 {
            return fail("denoise_steps must be >= 1".into());
        }
        if let Some(bad) = self.narrative_schedule.iter().find(|s| s.segment >= self.segments) {
            return fail(format!("narrative swap at segment {} but only {} segments", bad.segment, self.segments));
        }
        self.anchor.validate().map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn total_frames(&self) -> usize {
        self.segments * self.window
    }

    fn narrative_target(&self, segment: usize) -> Option<&IdentityDescriptor> {
        self.narrative_schedule
            .iter()
            .filter(|s| s.segment <= segment)
            .max_by_key(|s| s.segment)
            .map(|s| &s.identity)
    }
}

/// Who is being animated: the reference image and, when known, the identity
/// that produced it (needed for oracle keyframes and narrative renders).
#[derive(Clone, Debug)]
pub struct Subject {
    pub identity: Option<IdentityDescriptor>,
    pub reference: Array3<f32>,
    /// Target image for `TargetSource::ExternalImage`.
    pub external: Option<Array3<f32>>,
}

impl Subject {
    pub fn from_identity(identity: &IdentityDescriptor, cfg: &RenderConfig) -> Self {
        Self {
            identity: Some(*identity),
            reference: reference_frame(identity, cfg),
            external: None,
        }
    }

    pub fn from_frame(reference: Array3<f32>) -> Self {
        Self {
            identity: None,
            reference,
            external: None,
        }
    }
}

/// Per-segment record kept for run manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub index: usize,
    pub window: (usize, usize),
    pub anchor_frame_index: Option<i64>,
    /// Temporal index of the appended anchor in the token sequence.
    pub anchor_token_index: Option<i64>,
    pub boundary_frames: Option<(i64, i64)>,
    pub narrative: bool,
}

#[derive(Clone, Debug)]
pub struct RolloutOutput {
    pub video: VideoClip,
    /// Timeline frame each output frame shows. Starting frames repeat the
    /// previous segment's tail, so they map back to those frames.
    pub source_frames: Vec<usize>,
    pub segments: Vec<SegmentRecord>,
}

impl RolloutOutput {
    /// Audio aligned to the output frames via `source_frames`.
    pub fn aligned_audio(&self, audio: &AudioTrack) -> Result<AudioTrack> {
        let samples = self
            .source_frames
            .iter()
            .map(|&t| {
                audio
                    .samples
                    .get(t)
                    .copied()
                    .ok_or_else(|| invalid(format!("audio has no sample for frame {t}")))
            })
            .collect::<Result<Vec<_>>>()?;
        AudioTrack::new(samples, audio.frame_rate)
    }
}

struct Request<'a> {
    plan: &'a SegmentPlan,
    audio: &'a AudioTrack,
    rng: &'a mut ChaCha8Rng,
}

struct Prepared {
    seq: TokenSequence,
    /// Clean `[0, 1]` latents of replaced window slots.
    clean: Vec<(usize, Array3<f32>)>,
    anchor_t: Option<i64>,
    audio: Vec<f32>,
    frame_rate: u32,
    origin: usize,
}

fn model_latent(frame: &Array3<f32>, r: usize) -> Array3<f32> {
    frame_to_latent(frame.view(), r).mapv(to_model_space)
}

fn prepare(model: &Denoiser, req: &mut Request<'_>) -> Result<Prepared> {
    let cfg = model.config();
    let (l, r, n) = (cfg.window, cfg.ratio, cfg.latent_frames());
    let plan = req.plan;
    if plan.window.1 - plan.window.0 != l {
        return Err(invalid(format!(
            "plan window {:?} does not match model window L = {l}",
            plan.window
        )));
    }
    if req.audio.len() != l {
        return Err(Error::InvalidArgument(format!(
            "audio segment has {} samples, window needs {l}",
            req.audio.len()
        )));
    }
    let (h, w, c) = (cfg.frame_height, cfg.frame_width, 3 * r);
    let noise = Array4::from_shape_simple_fn((n, h, w, c), || StandardNormal.sample(req.rng));
    let window = LatentSequence {
        latents: noise,
        ratio: r,
        origin_frame: plan.window.0 as i64,
        source_frames: l,
        padded: false,
        frame_rate: req.audio.frame_rate,
    };

    let mut clean = Vec::new();
    let anchor_latent = plan.anchor_image.as_ref().map(|f| model_latent(f, r));
    let boundary = plan
        .boundary_images
        .as_ref()
        .map(|[a, b]| (frame_to_latent(a.view(), r), frame_to_latent(b.view(), r)));
    let boundary_model = boundary
        .as_ref()
        .map(|(a, b)| (a.mapv(to_model_space), b.mapv(to_model_space)));
    let end = plan.window.1 as i64;
    let start = plan.window.0 as i64;
    let anchor = match (plan.anchor_frame_index, &anchor_latent, &boundary_model) {
        (Some(idx), Some(latent), _) if idx >= end => Anchor::Lookahead {
            latent: latent.view(),
            d: (idx - (end - 1)) / r as i64,
        },
        (Some(idx), Some(latent), _) if idx < start => Anchor::Past {
            latent: latent.view(),
            offset_frames: start - idx,
        },
        (Some(idx), _, _) => return Err(invalid(format!("anchor frame {idx} has no target image or lies inside the window"))),
        (None, _, Some((first, last))) => {
            let (_, last_clean) = boundary.as_ref().expect("boundary latents");
            clean.push((n - 1, last_clean.clone()));
            if plan.starting_frames.is_none() {
                clean.push((0, boundary.as_ref().expect("boundary latents").0.clone()));
                Anchor::Boundary {
                    first: Some(first.view()),
                    last: last.view(),
                }
            } else {
                Anchor::Boundary {
                    first: None,
                    last: last.view(),
                }
            }
        }
        (None, _, None) => Anchor::None,
    };
    let mut seq = assemble_sequence(&window, &anchor, cfg.patch)?;
    let anchor_t = (seq.appended_frames() > 0).then(|| seq.positions[seq.window_tokens].t);

    if let Some(starting) = &plan.starting_frames {
        if starting.len() != cfg.starting_frames() {
            return Err(invalid(format!(
                "{} starting frames given, model uses {}",
                starting.len(),
                cfg.starting_frames()
            )));
        }
        let lat = encode(starting, r)?;
        for k in 0..lat.len() {
            let latent = lat.frame(k).to_owned();
            seq.replace_frame(k, latent.mapv(to_model_space).view())?;
            clean.retain(|(j, _)| *j != k);
            clean.push((k, latent));
        }
    }
    Ok(Prepared {
        seq,
        clean,
        anchor_t,
        audio: req.audio.samples.clone(),
        frame_rate: req.audio.frame_rate,
        origin: plan.window.0,
    })
}

/// Euler integration of the learned velocity from `tau = 1` to `0` for a
/// batch of segments. Replaced slots keep their clean values at every step.
fn denoise(model: &Denoiser, requests: &mut [Request<'_>], steps: usize) -> Result<Vec<(VideoClip, Option<i64>)>> {
    if steps == 0 {
        return Err(Error::InvalidConfig("denoise_steps must be >= 1".into()));
    }
    let mut prepared = requests.iter_mut().map(|r| prepare(model, r)).collect::<Result<Vec<_>>>()?;
    let dt = 1.0 / steps as f32;
    for j in 0..steps {
        let tau = 1.0 - j as f32 * dt;
        let items: Vec<DenoiseItem<'_>> = prepared
            .iter()
            .map(|p| DenoiseItem {
                seq: &p.seq,
                audio: &p.audio,
                tau,
            })
            .collect();
        let velocities = model.predict(&items)?;
        for (p, v) in prepared.iter_mut().zip(velocities) {
            for k in 0..p.seq.window_tokens {
                if p.seq.condition_mask[k] {
                    continue;
                }
                let mut row = p.seq.tokens.row_mut(k);
                row.scaled_add(-dt, &v.row(k));
            }
        }
    }
    prepared
        .into_iter()
        .map(|p| {
            let cfg = model.config();
            let mut latents = unpatchify(&p.seq.strip_appended())?.mapv(|x| from_model_space(x).clamp(0.0, 1.0));
            for (k, lat) in &p.clean {
                latents.index_axis_mut(Axis(0), *k).assign(lat);
            }
            let seq = LatentSequence {
                latents,
                ratio: cfg.ratio,
                origin_frame: p.origin as i64,
                source_frames: cfg.window,
                padded: false,
                frame_rate: p.frame_rate,
            };
            Ok((decode(&seq), p.anchor_t))
        })
        .collect()
}

/// One segment of `L` frames from a fully populated plan.
pub fn generate_segment(
    plan: &SegmentPlan,
    model: &Denoiser,
    audio_segment: &AudioTrack,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<VideoClip> {
    let mut req = [Request {
        plan,
        audio: audio_segment,
        rng,
    }];
    Ok(denoise(model, &mut req, steps)?.remove(0).0)
}

/// One long rollout to be run alongside others.
#[derive(Clone, Copy, Debug)]
pub struct RolloutJob<'a> {
    pub subject: &'a Subject,
    pub audio: &'a AudioTrack,
    pub seed: u64,
}

fn segment_target(
    config: &RolloutConfig,
    job: &RolloutJob<'_>,
    plan: &SegmentPlan,
    render: &RenderConfig,
) -> Result<(Option<Array3<f32>>, bool)> {
    let spec = &config.anchor;
    if !spec.mode.appends_anchor() {
        return Ok((None, false));
    }
    if let Some(identity) = config.narrative_target(plan.index) {
        return Ok((Some(reference_frame(identity, render)), true));
    }
    if spec.mode == AnchorMode::Past {
        return Ok((Some(job.subject.reference.clone()), false));
    }
    let image = match spec.target_source {
        TargetSource::ReferenceImage => job.subject.reference.clone(),
        TargetSource::ExternalImage => job
            .subject
            .external
            .clone()
            .ok_or_else(|| Error::InvalidArgument("external target source needs an external image".into()))?,
        TargetSource::OracleKeyframe => {
            let identity = job
                .subject
                .identity
                .ok_or_else(|| Error::InvalidArgument("oracle keyframes need an identity descriptor".into()))?;
            let idx = plan.anchor_frame_index.unwrap_or(0).clamp(0, job.audio.len() as i64 - 1) as usize;
            render_keyframe(&identity, job.audio, idx, config.keyframe_context, render)?
                .frame(0)
                .to_owned()
        }
    };
    Ok((Some(image), false))
}

/// Runs several long rollouts in lockstep, batching each segment's
/// denoising across jobs. Each job draws noise from its own seeded stream.
pub fn generate_long_batch(config: &RolloutConfig, model: &Denoiser, jobs: &[RolloutJob<'_>]) -> Result<Vec<RolloutOutput>> {
    config.validate()?;
    let mc = model.config();
    if config.window != mc.window {
        return Err(Error::InvalidConfig(format!(
            "rollout window {} differs from model window {}",
            config.window, mc.window
        )));
    }
    let total = config.total_frames();
    for job in jobs {
        if job.audio.len() < total {
            return Err(Error::InvalidArgument(format!(
                "audio has {} samples, {} segments of {} need {total}",
                job.audio.len(),
                config.segments,
                config.window
            )));
        }
        if job.subject.reference.shape() != [mc.frame_height, mc.frame_width, 3] {
            return Err(Error::InvalidArgument(format!(
                "reference frame {:?} does not match model frames {}x{}",
                job.subject.reference.shape(),
                mc.frame_height,
                mc.frame_width
            )));
        }
    }
    if config.anchor.mode == AnchorMode::Boundary && jobs.iter().any(|j| j.subject.identity.is_none()) {
        return Err(Error::InvalidArgument("boundary keyframes need an identity descriptor".into()));
    }
    let render = RenderConfig {
        height: mc.frame_height,
        width: mc.frame_width,
        ..RenderConfig::default()
    };
    let s = mc.starting_frames();
    let plans = plan_segments(total, config.window, s, &config.anchor)?;
    let mut rngs: Vec<ChaCha8Rng> = jobs.iter().map(|j| ChaCha8Rng::seed_from_u64(j.seed)).collect();
    let mut outputs: Vec<Vec<VideoClip>> = vec![Vec::with_capacity(config.segments); jobs.len()];
    let mut records: Vec<Vec<SegmentRecord>> = vec![Vec::with_capacity(config.segments); jobs.len()];

    for base in plans.iter().take(config.segments) {
        let mut job_plans = Vec::with_capacity(jobs.len());
        let mut audios = Vec::with_capacity(jobs.len());
        let mut narrative = Vec::with_capacity(jobs.len());
        for (j, job) in jobs.iter().enumerate() {
            let mut plan = base.clone();
            plan.starting_frames = if base.index > 0 {
                let prev = outputs[j].last().expect("previous segment");
                Some(prev.slice(prev.len() - s, prev.len()))
            } else if config.seed_with_reference && s > 0 {
                let frames = ndarray::stack(Axis(0), &vec![job.subject.reference.view(); s]).map_err(|e| invalid(e.to_string()))?;
                Some(VideoClip::new(frames, job.audio.frame_rate)?)
            } else {
                None
            };
            let (image, swapped) = segment_target(config, job, &plan, &render)?;
            plan.anchor_image = image;
            if let Some((a, b)) = plan.boundary_frames {
                let id = job.subject.identity.expect("checked above");
                let kf = |t: i64| -> Result<Array3<f32>> {
                    Ok(render_keyframe(&id, job.audio, t as usize, config.keyframe_context, &render)?
                        .frame(0)
                        .to_owned())
                };
                plan.boundary_images = Some([kf(a)?, kf(b)?]);
            }
            audios.push(job.audio.segment(plan.window.0, config.window)?);
            narrative.push(swapped);
            job_plans.push(plan);
        }
        let mut requests: Vec<Request<'_>> = job_plans
            .iter()
            .zip(&audios)
            .zip(rngs.iter_mut())
            .map(|((plan, audio), rng)| Request { plan, audio, rng })
            .collect();
        let clips = denoise(model, &mut requests, config.denoise_steps)?;
        for (j, (clip, anchor_t)) in clips.into_iter().enumerate() {
            let plan = &job_plans[j];
            records[j].push(SegmentRecord {
                index: plan.index,
                window: plan.window,
                anchor_frame_index: plan.anchor_frame_index,
                anchor_token_index: anchor_t,
                boundary_frames: plan.boundary_frames,
                narrative: narrative[j],
            });
            outputs[j].push(clip);
        }
    }

    outputs
        .into_iter()
        .zip(records)
        .map(|(clips, segments)| {
            let video = VideoClip::concat(&clips)?;
            let mut source_frames = Vec::with_capacity(video.len());
            for i in 0..config.segments {
                for k in 0..config.window {
                    let t = i * config.window + k;
                    source_frames.push(if i > 0 && k < s { t - s } else { t });
                }
            }
            Ok(RolloutOutput {
                video,
                source_frames,
                segments,
            })
        })
        .collect()
}

/// A single long rollout seeded by `config.seed`.
pub fn generate_long(config: &RolloutConfig, subject: &Subject, audio: &AudioTrack, model: &Denoiser) -> Result<RolloutOutput> {
    let job = RolloutJob {
        subject,
        audio,
        seed: config.seed,
    };
    Ok(generate_long_batch(config, model, &[job])?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub gap: usize,
    pub motion: f64,
}

/// Generates a window with no starting frames, conditioned only on
/// `condition` appended at latent index `gap`, and measures how far the
/// keypoints of the first generated frame moved from the condition frame.
/// All gaps share one noise draw so only the anchor's position differs.
pub fn two_frame_probe(
    model: &Denoiser,
    condition: &Array3<f32>,
    audio: &AudioTrack,
    gaps: &[usize],
    seed: u64,
) -> Result<Vec<ProbeResult>> {
    let cfg = model.config();
    if gaps.iter().any(|&g| g < 1) {
        return Err(Error::InvalidArgument("probe gaps must be >= 1".into()));
    }
    if audio.len() != cfg.window {
        return Err(Error::InvalidArgument(format!(
            "probe audio has {} samples, window needs {}",
            audio.len(),
            cfg.window
        )));
    }
    let (n, r) = (cfg.latent_frames(), cfg.ratio);
    let latent = model_latent(condition, r);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Array4<f32> = Array4::from_shape_simple_fn((n, cfg.frame_height, cfg.frame_width, 3 * r), || {
        StandardNormal.sample(&mut rng)
    });
    let window = LatentSequence {
        latents: noise,
        ratio: r,
        origin_frame: 0,
        source_frames: cfg.window,
        padded: false,
        frame_rate: audio.frame_rate,
    };
    let mut seqs = gaps
        .iter()
        .map(|&g| {
            assemble_sequence(
                &window,
                &Anchor::At {
                    latent: latent.view(),
                    t: g as i64,
                },
                cfg.patch,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let steps = default_steps();
    let dt = 1.0 / steps as f32;
    for j in 0..steps {
        let tau = 1.0 - j as f32 * dt;
        let items: Vec<DenoiseItem<'_>> = seqs
            .iter()
            .map(|seq| DenoiseItem {
                seq,
                audio: &audio.samples,
                tau,
            })
            .collect();
        let velocities = model.predict(&items)?;
        for (seq, v) in seqs.iter_mut().zip(velocities) {
            for k in 0..seq.window_tokens {
                let mut row = seq.tokens.row_mut(k);
                row.scaled_add(-dt, &v.row(k));
            }
        }
    }
    let reference = extract_keypoints(condition.view());
    gaps.iter()
        .zip(&seqs)
        .map(|(&gap, seq)| {
            let latents = unpatchify(&seq.strip_appended())?.mapv(|x| from_model_space(x).clamp(0.0, 1.0));
            let first = latents.index_axis(Axis(0), 0);
            let frame = first.slice(ndarray::s![.., .., 0..3]).to_owned();
            let kp = extract_keypoints(frame.view());
            let motion = reference
                .iter()
                .zip(&kp)
                .map(|(a, b)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
                .sum::<f64>()
                / reference.len() as f64;
            Ok(ProbeResult { gap, motion })
        })
        .collect()
}

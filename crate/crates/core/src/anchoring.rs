//! Keyframe anchoring: segment plans, anchored token sequences and
//! training-time anchor sampling.
//!
//! In lookahead mode the clean anchor latent is appended after the window
//! with temporal index `n - 1 + d`, so the window sees a target `d` latent
//! frames beyond its last frame but never has to reach it.

use ndarray::{Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::latentspace::{latent_distance, patchify, LatentSequence, TokenSequence};
use crate::synthworld::VideoClip;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    None,
    Lookahead,
    SelfKeyframe,
    Boundary,
    Past,
}

impl AnchorMode {
    pub fn name(self) -> &'static str {
        match self {
            AnchorMode::None => "none",
            AnchorMode::Lookahead => "lookahead",
            AnchorMode::SelfKeyframe => "self_keyframe",
            AnchorMode::Boundary => "boundary",
            AnchorMode::Past => "past",
        }
    }

    /// Modes that append one clean anchor frame to the window.
    pub fn appends_anchor(self) -> bool {
        matches!(self, AnchorMode::Lookahead | AnchorMode::SelfKeyframe | AnchorMode::Past)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    ReferenceImage,
    ExternalImage,
    OracleKeyframe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub mode: AnchorMode,
    /// Lookahead distance `D` in pixel frames.
    #[serde(default = "default_lookahead")]
    pub lookahead: i64,
    /// Past-anchor offset in pixel frames.
    #[serde(default = "default_past_offset")]
    pub past_offset: i64,
    /// Largest training-time anchor distance, in latent frames.
    #[serde(default = "default_d_max")]
    pub d_max: usize,
    #[serde(default = "default_target")]
    pub target_source: TargetSource,
}

fn default_lookahead() -> i64 {
    12
}
fn default_past_offset() -> i64 {
    8
}
fn default_d_max() -> usize {
    16
}
fn default_target() -> TargetSource {
    TargetSource::ReferenceImage
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self::self_keyframe(default_lookahead())
    }
}

impl AnchorSpec {
    pub fn with_mode(mode: AnchorMode) -> Self {
        let target_source = match mode {
            AnchorMode::Boundary => TargetSource::OracleKeyframe,
            _ => TargetSource::ReferenceImage,
        };
        Self {
            mode,
            lookahead: default_lookahead(),
            past_offset: default_past_offset(),
            d_max: default_d_max(),
            target_source,
        }
    }

    pub fn none() -> Self {
        Self::with_mode(AnchorMode::None)
    }

    pub fn self_keyframe(lookahead: i64) -> Self {
        Self {
            lookahead,
            ..Self::with_mode(AnchorMode::SelfKeyframe)
        }
    }

    pub fn lookahead(lookahead: i64, target_source: TargetSource) -> Self {
        Self {
            lookahead,
            target_source,
            ..Self::with_mode(AnchorMode::Lookahead)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.mode, AnchorMode::Lookahead | AnchorMode::SelfKeyframe) && self.lookahead <= 0 {
            return Err(Error::InvalidConfig(format!(
                "lookahead distance must be > 0, got {}",
                self.lookahead
            )));
        }
        if self.mode == AnchorMode::SelfKeyframe && self.target_source != TargetSource::ReferenceImage {
            return Err(Error::InvalidConfig("self-keyframing requires the reference image as target".into()));
        }
        if self.mode == AnchorMode::Past && self.past_offset <= 0 {
            return Err(Error::InvalidConfig("past offset must be > 0".into()));
        }
        if self.d_max == 0 {
            return Err(Error::InvalidConfig("d_max must be > 0".into()));
        }
        Ok(())
    }

    /// Latent distance `floor(D / r)`.
    pub fn latent_distance(&self, r: usize) -> Result<i64> {
        latent_distance(self.lookahead, r)
    }

    /// Temporal index of the past anchor, `-ceil(past_offset / r)`.
    pub fn past_index(&self, r: usize) -> i64 {
        -(self.past_offset + r as i64 - 1).div_euclid(r as i64)
    }
}

/// One step of the autoregressive rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPlan {
    pub index: usize,
    /// Pixel-frame window `[start, end)`.
    pub window: (usize, usize),
    /// Source range (in output frames) of the starting frames; `None` for the
    /// first segment.
    pub starting_range: Option<(usize, usize)>,
    /// Filled in by the rollout once the previous segment exists.
    pub starting_frames: Option<VideoClip>,
    pub anchor_frame_index: Option<i64>,
    /// Boundary mode: the two keyframe indices `iL` and `(i+1)L - 1`.
    pub boundary_frames: Option<(i64, i64)>,
    pub anchor_image: Option<Array3<f32>>,
    pub boundary_images: Option<[Array3<f32>; 2]>,
}

pub fn plan_segments(total_frames: usize, window: usize, starting: usize, spec: &AnchorSpec) -> Result<Vec<SegmentPlan>> {
    if window <= starting {
        return Err(invalid(format!("window L = {window} must exceed starting frames s = {starting}")));
    }
    if total_frames < window {
        return Err(invalid(format!("total frames {total_frames} shorter than one window {window}")));
    }
    spec.validate()?;
    let count = total_frames.div_ceil(window);
    let plans = (0..count)
        .map(|i| {
            let (start, end) = (i * window, (i + 1) * window);
            let anchor_frame_index = match spec.mode {
                AnchorMode::Lookahead | AnchorMode::SelfKeyframe => Some(end as i64 - 1 + spec.lookahead),
                AnchorMode::Past => Some(start as i64 - spec.past_offset),
                AnchorMode::None | AnchorMode::Boundary => None,
            };
            let boundary_frames = (spec.mode == AnchorMode::Boundary).then_some((start as i64, end as i64 - 1));
            SegmentPlan {
                index: i,
                window: (start, end),
                starting_range: (i > 0 && starting > 0).then(|| (start - starting, start)),
                starting_frames: None,
                anchor_frame_index,
                boundary_frames,
                anchor_image: None,
                boundary_images: None,
            }
        })
        .collect();
    Ok(plans)
}

/// How the clean conditioning enters a window's token sequence.
#[derive(Clone, Debug)]
pub enum Anchor<'a> {
    None,
    /// Appended at temporal index `n - 1 + d`.
    Lookahead { latent: ArrayView3<'a, f32>, d: i64 },
    /// Appended at temporal index `-ceil(offset_frames / r)`.
    Past { latent: ArrayView3<'a, f32>, offset_frames: i64 },
    /// Appended at an explicit temporal index (training examples).
    At { latent: ArrayView3<'a, f32>, t: i64 },
    /// Replaces window latents `0` (if given) and `n - 1`.
    Boundary {
        first: Option<ArrayView3<'a, f32>>,
        last: ArrayView3<'a, f32>,
    },
}

impl<'a> Anchor<'a> {
    /// Anchor for one rollout segment. Lookahead and self-keyframing produce
    /// the same placement; they differ only in where the target image comes from.
    pub fn for_segment(spec: &AnchorSpec, r: usize, target: Option<ArrayView3<'a, f32>>) -> Result<Anchor<'a>> {
        let need = |t: Option<ArrayView3<'a, f32>>| t.ok_or_else(|| invalid(format!("{} mode needs a target latent", spec.mode.name())));
        Ok(match spec.mode {
            AnchorMode::None => Anchor::None,
            AnchorMode::Lookahead | AnchorMode::SelfKeyframe => Anchor::Lookahead {
                latent: need(target)?,
                d: spec.latent_distance(r)?,
            },
            AnchorMode::Past => Anchor::Past {
                latent: need(target)?,
                offset_frames: spec.past_offset,
            },
            AnchorMode::Boundary => return Err(invalid("boundary anchors need two keyframes; build Anchor::Boundary directly")),
        })
    }
}

/// Token sequence of a window plus its anchor conditioning.
///
/// Window tokens keep their order and temporal indices `0..n`; appended
/// anchors are flagged in `condition_mask`.
pub fn assemble_sequence(window: &LatentSequence, anchor: &Anchor<'_>, patch: usize) -> Result<TokenSequence> {
    let n = window.len() as i64;
    let mut seq = patchify(window, patch, 0)?;
    let check = |latent: &ArrayView3<'_, f32>| -> Result<()> {
        let w = window.latents.shape();
        if latent.shape() != &w[1..] {
            return Err(invalid(format!(
                "anchor latent {:?} does not match window latents {:?}",
                latent.shape(),
                &w[1..]
            )));
        }
        Ok(())
    };
    match anchor {
        Anchor::None => {}
        Anchor::Lookahead { latent, d } => {
            if *d < 1 {
                return Err(invalid(format!("lookahead latent distance must be >= 1, got {d}")));
            }
            check(latent)?;
            seq.append_frame(latent.view(), n - 1 + d)?;
        }
        Anchor::Past { latent, offset_frames } => {
            if *offset_frames < 1 {
                return Err(invalid("past offset must be >= 1"));
            }
            check(latent)?;
            let r = window.ratio as i64;
            seq.append_frame(latent.view(), -((offset_frames + r - 1) / r))?;
        }
        Anchor::At { latent, t } => {
            check(latent)?;
            seq.append_frame(latent.view(), *t)?;
        }
        Anchor::Boundary { first, last } => {
            check(last)?;
            if let Some(first) = first {
                check(first)?;
                seq.replace_frame(0, first.view())?;
            }
            seq.replace_frame(window.len() - 1, last.view())?;
        }
    }
    Ok(seq)
}

/// Flexible anchor position `l ~ U{0, ..., n - 1 + d_max}`.
pub fn sample_anchor_position<R: Rng + ?Sized>(n: usize, d_max: usize, rng: &mut R) -> Result<i64> {
    if n < 1 || d_max < 1 {
        return Err(invalid(format!("need n >= 1 and d_max >= 1, got n = {n}, d_max = {d_max}")));
    }
    Ok(rng.gen_range(0..=(n - 1 + d_max)) as i64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub window: LatentSequence,
    pub anchor: Array3<f32>,
    pub anchor_index: i64,
    /// `l - (n - 1)`; zero or negative for in-window anchors. Logging only.
    pub d_effective: i64,
}

/// Window `[0, n)` of `clip_latents` with the clean latent at `l` as anchor.
pub fn make_training_example(clip_latents: &LatentSequence, l: i64, n: usize, d_max: usize) -> Result<TrainingExample> {
    if clip_latents.len() < n + d_max {
        return Err(invalid(format!(
            "clip has {} latents, needs n + d_max = {}",
            clip_latents.len(),
            n + d_max
        )));
    }
    if l < 0 || l > (n - 1 + d_max) as i64 {
        return Err(invalid(format!("anchor position {l} outside [0, {}]", n - 1 + d_max)));
    }
    Ok(TrainingExample {
        window: clip_latents.range(0, n),
        anchor: clip_latents.frame(l as usize).to_owned(),
        anchor_index: l,
        d_effective: l - (n as i64 - 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latentspace::{decode, encode, frame_to_latent};
    use crate::stats::chi_square_uniform_p;
    use crate::synthworld::{render_clip, sample_identity, synth_audio};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn latents(frames: usize, r: usize) -> LatentSequence {
        let id = sample_identity(3);
        let audio = synth_audio(frames, 3).unwrap();
        encode(&render_clip(&id, &audio, 3).unwrap().0, r).unwrap()
    }

    #[test]
    fn lookahead_anchor_follows_window() {
        let fps = 16usize;
        let spec = AnchorSpec::self_keyframe(3 * fps as i64);
        let plans = plan_segments(160 * fps, 5 * fps, 1, &spec).unwrap();
        assert_eq!(plans.len(), 32);
        // segment covering 5 s .. 10 s anchors on the frame ending at 13 s
        let p = &plans[1];
        assert_eq!(p.window, (5 * fps, 10 * fps));
        assert_eq!(p.anchor_frame_index.unwrap() + 1, 13 * fps as i64);
        assert_eq!(plans[2].anchor_frame_index.unwrap() + 1, 18 * fps as i64);

        let plans = plan_segments(64, 16, 1, &AnchorSpec::self_keyframe(12)).unwrap();
        assert_eq!(plans[0].anchor_frame_index, Some(27));
        assert_eq!(plans[0].starting_range, None);
        assert_eq!(plans[1].starting_range, Some((15, 16)));
    }

    #[test]
    fn none_mode_has_no_anchor() {
        let plans = plan_segments(64, 16, 1, &AnchorSpec::none()).unwrap();
        assert!(plans.iter().all(|p| p.anchor_frame_index.is_none() && p.boundary_frames.is_none()));
    }

    #[test]
    fn boundary_and_past_indices() {
        let plans = plan_segments(48, 16, 1, &AnchorSpec::with_mode(AnchorMode::Boundary)).unwrap();
        assert_eq!(plans[2].boundary_frames, Some((32, 47)));
        let plans = plan_segments(48, 16, 1, &AnchorSpec::with_mode(AnchorMode::Past)).unwrap();
        assert_eq!(plans[1].anchor_frame_index, Some(16 - 8));
    }

    #[test]
    fn plan_rejects_bad_windows() {
        assert!(plan_segments(64, 4, 4, &AnchorSpec::none()).is_err());
        assert!(plan_segments(8, 16, 1, &AnchorSpec::none()).is_err());
        let bad = AnchorSpec {
            lookahead: 0,
            ..AnchorSpec::self_keyframe(1)
        };
        assert!(plan_segments(64, 16, 1, &bad).is_err());
    }

    #[test]
    fn spec_invariants() {
        let mut s = AnchorSpec::self_keyframe(4);
        s.target_source = TargetSource::ExternalImage;
        assert!(s.validate().is_err());
        let mut s = AnchorSpec::self_keyframe(4);
        s.d_max = 0;
        assert!(s.validate().is_err());
        assert_eq!(AnchorSpec::with_mode(AnchorMode::Past).past_index(4), -2);
        assert_eq!(AnchorSpec::with_mode(AnchorMode::Past).past_index(3), -3);
    }

    #[test]
    fn assembled_anchor_sits_at_n_minus_one_plus_d() {
        let l = latents(16, 1);
        let target = l.frame(0).to_owned();
        let seq = assemble_sequence(&l, &Anchor::Lookahead { latent: target.view(), d: 3 }, 8).unwrap();
        let tpf = seq.tokens_per_frame();
        assert_eq!(seq.len(), 17 * tpf);
        for k in 16 * tpf..seq.len() {
            assert_eq!(seq.positions[k].t, 18);
            assert!(seq.condition_mask[k]);
        }
        assert!(seq.condition_mask[..16 * tpf].iter().all(|m| !m));
        let plain = patchify(&l, 8, 0).unwrap();
        assert_eq!(seq.strip_appended(), plain);
    }

    #[test]
    fn assembly_errors() {
        let l = latents(8, 1);
        let target = l.frame(0).to_owned();
        assert!(assemble_sequence(&l, &Anchor::Lookahead { latent: target.view(), d: 0 }, 8).is_err());
        let wrong = Array3::<f32>::zeros((16, 16, 3));
        assert!(assemble_sequence(&l, &Anchor::Lookahead { latent: wrong.view(), d: 2 }, 8).is_err());
    }

    #[test]
    fn past_and_boundary_assembly() {
        let l = latents(16, 4);
        let target = l.frame(0).to_owned();
        let seq = assemble_sequence(&l, &Anchor::Past { latent: target.view(), offset_frames: 8 }, 8).unwrap();
        assert_eq!(seq.positions.last().unwrap().t, -2);

        let first = l.frame(1).to_owned();
        let last = l.frame(2).to_owned();
        let seq = assemble_sequence(&l, &Anchor::Boundary { first: Some(first.view()), last: last.view() }, 8).unwrap();
        let tpf = seq.tokens_per_frame();
        assert_eq!(seq.len(), 4 * tpf);
        let marked: Vec<usize> = (0..4).filter(|k| seq.condition_mask[k * tpf]).collect();
        assert_eq!(marked, vec![0, 3]);
    }

    #[test]
    fn self_keyframe_matches_lookahead_with_reference() {
        let l = latents(16, 4);
        let reference = frame_to_latent(l.frame(2).slice(ndarray::s![.., .., 0..3]), 4);
        let a = Anchor::for_segment(&AnchorSpec::self_keyframe(12), 4, Some(reference.view())).unwrap();
        let b = Anchor::for_segment(&AnchorSpec::lookahead(12, TargetSource::ReferenceImage), 4, Some(reference.view())).unwrap();
        assert_eq!(assemble_sequence(&l, &a, 8).unwrap(), assemble_sequence(&l, &b, 8).unwrap());
    }

    #[test]
    fn sampler_support_and_uniformity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0u64; 8];
        for _ in 0..100_000 {
            let l = sample_anchor_position(4, 4, &mut rng).unwrap();
            assert!((0..8).contains(&l));
            counts[l as usize] += 1;
        }
        let sigma = (100_000.0f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for c in counts {
            assert!((c as f64 - 12_500.0).abs() < 3.0 * sigma);
        }
        assert!(chi_square_uniform_p(&counts) > 0.01);
        for _ in 0..100 {
            assert!((0..=1).contains(&sample_anchor_position(1, 1, &mut rng).unwrap()));
        }
        assert!(sample_anchor_position(0, 1, &mut rng).is_err());
    }

    #[test]
    fn training_examples() {
        let l = latents(24, 1);
        let ex = make_training_example(&l, 3, 4, 4).unwrap();
        assert_eq!(ex.window.len(), 4);
        assert_eq!(ex.anchor, ex.window.frame(3).to_owned());
        assert_eq!(ex.d_effective, 0);
        let ex = make_training_example(&l, 7, 4, 4).unwrap();
        assert_eq!(ex.d_effective, 4);
        let clip = decode(&l);
        assert_eq!(ex.anchor, clip.frames.index_axis(ndarray::Axis(0), 7).to_owned());
        assert!(make_training_example(&l, 8, 4, 4).is_err());
        assert!(make_training_example(&l.range(0, 6), 2, 4, 4).is_err());
    }

    proptest! {
        #[test]
        fn anchor_advances_by_window(l in 2usize..40, d in 1i64..100, segs in 2usize..8) {
            let plans = plan_segments(l * segs, l, 1, &AnchorSpec::self_keyframe(d)).unwrap();
            for w in plans.windows(2) {
                let a = w[0].anchor_frame_index.unwrap();
                let b = w[1].anchor_frame_index.unwrap();
                prop_assert_eq!(b - a, l as i64);
                prop_assert_eq!(a - (w[0].window.1 as i64 - 1), d);
            }
        }

        #[test]
        fn sampler_stays_in_range(n in 1usize..20, d_max in 1usize..20, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = sample_anchor_position(n, d_max, &mut rng).unwrap();
            prop_assert!(l >= 0 && l <= (n - 1 + d_max) as i64);
        }
    }
}

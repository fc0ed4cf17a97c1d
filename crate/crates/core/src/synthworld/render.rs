use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AudioTrack, IdentityDescriptor, SceneState, Shape, VideoClip};
use crate::error::invalid;
use crate::Result;

/// Mouth bar geometry relative to the sprite size `s`: centred at `s * MOUTH_DROP`
/// below the sprite centre, `s * MOUTH_WIDTH` wide and `aperture * s * MOUTH_MAX_HEIGHT` tall.
pub(crate) const MOUTH_DROP: f64 = 0.15;
pub(crate) const MOUTH_WIDTH: f64 = 0.4;
pub(crate) const MOUTH_MAX_HEIGHT: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Samples per pixel side for the shape body. The mouth bar is rasterised
    /// with exact box coverage.
    pub supersample: usize,
    /// Standard deviation of the per-frame centre increments, in frame units.
    pub motion_sigma: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            supersample: 4,
            motion_sigma: 0.01,
        }
    }
}

pub(crate) fn hue_to_rgb(hue: f64) -> [f32; 3] {
    let h = hue.rem_euclid(1.0) * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r as f32, g as f32, b as f32]
}

/// Point-in-shape test in pixel coordinates for a shape of bounding size `s`
/// centred on `(cx, cy)`. Triangles point up.
pub(crate) fn inside(shape: Shape, x: f64, y: f64, cx: f64, cy: f64, s: f64) -> bool {
    let dx = x - cx;
    let dy = y - cy;
    let half = s / 2.0;
    match shape {
        Shape::Square => dx.abs() <= half && dy.abs() <= half,
        Shape::Circle => dx * dx + dy * dy <= half * half,
        Shape::Triangle => dy <= half && dx.abs() <= (dy + half) / 2.0,
    }
}

/// Supersampled body coverage of one shape over an `h x w` raster.
pub(crate) fn shape_coverage(
    shape: Shape,
    cx: f64,
    cy: f64,
    s: f64,
    h: usize,
    w: usize,
    ss: usize,
) -> Vec<f32> {
    let mut cov = vec![0.0f32; h * w];
    let half = s / 2.0 + 1.0;
    let i0 = ((cy - half).floor().max(0.0)) as usize;
    let i1 = ((cy + half).ceil().max(0.0) as usize).min(h);
    let j0 = ((cx - half).floor().max(0.0)) as usize;
    let j1 = ((cx + half).ceil().max(0.0) as usize).min(w);
    let inv = 1.0 / (ss * ss) as f32;
    for i in i0..i1 {
        for j in j0..j1 {
            let mut hits = 0usize;
            for a in 0..ss {
                for b in 0..ss {
                    let y = i as f64 + (a as f64 + 0.5) / ss as f64;
                    let x = j as f64 + (b as f64 + 0.5) / ss as f64;
                    if inside(shape, x, y, cx, cy, s) {
                        hits += 1;
                    }
                }
            }
            cov[i * w + j] = hits as f32 * inv;
        }
    }
    cov
}

fn box_overlap(p0: f64, p1: f64, q0: f64, q1: f64) -> f64 {
    (p1.min(q1) - p0.max(q0)).max(0.0)
}

/// Render one frame of `identity` centred at `center` (frame units) with the
/// given mouth aperture.
pub fn render_frame(
    identity: &IdentityDescriptor,
    center: (f64, f64),
    aperture: f64,
    cfg: &RenderConfig,
) -> Array3<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let s = identity.size * h as f64;
    let cx = center.0 * w as f64;
    let cy = center.1 * h as f64;
    let body = shape_coverage(identity.shape, cx, cy, s, h, w, cfg.supersample);
    let color = hue_to_rgb(identity.hue);

    let aperture = aperture.clamp(0.0, 1.0);
    let mouth_cy = cy + MOUTH_DROP * s;
    let mouth_h = aperture * MOUTH_MAX_HEIGHT * s;
    let (mx0, mx1) = (cx - MOUTH_WIDTH * s / 2.0, cx + MOUTH_WIDTH * s / 2.0);
    let (my0, my1) = (mouth_cy - mouth_h / 2.0, mouth_cy + mouth_h / 2.0);

    let mut img = Array3::<f32>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let b = body[i * w + j];
            if b == 0.0 {
                continue;
            }
            let m = if mouth_h > 0.0 {
                (box_overlap(j as f64, j as f64 + 1.0, mx0, mx1)
                    * box_overlap(i as f64, i as f64 + 1.0, my0, my1)) as f32
            } else {
                0.0
            };
            let m = m.min(b);
            for c in 0..3 {
                img[[i, j, c]] = m + (b - m) * color[c];
            }
        }
    }
    img
}

fn reflect(mut v: f64, lo: f64, hi: f64) -> f64 {
    for _ in 0..8 {
        if v < lo {
            v = 2.0 * lo - v;
        } else if v > hi {
            v = 2.0 * hi - v;
        } else {
            break;
        }
    }
    v.clamp(lo, hi)
}

pub fn render_clip(
    identity: &IdentityDescriptor,
    audio: &AudioTrack,
    motion_seed: u64,
) -> Result<(VideoClip, SceneState)> {
    render_clip_with(identity, audio, motion_seed, &RenderConfig::default())
}

/// Render a clip whose centre follows a reflected Gaussian random walk from
/// the identity's base position and whose mouth follows the audio exactly.
pub fn render_clip_with(
    identity: &IdentityDescriptor,
    audio: &AudioTrack,
    motion_seed: u64,
    cfg: &RenderConfig,
) -> Result<(VideoClip, SceneState)> {
    if audio.is_empty() {
        return Err(invalid("audio must be nonempty"));
    }
    let t_len = audio.len();
    let mut rng = ChaCha8Rng::seed_from_u64(motion_seed);
    let step = Normal::new(0.0, cfg.motion_sigma.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let lo = identity.size / 2.0 + 0.02;
    let hi = 1.0 - lo;

    let mut positions = Vec::with_capacity(t_len);
    let mut pos = identity.base_position;
    for t in 0..t_len {
        if t > 0 {
            pos.0 = reflect(pos.0 + step.sample(&mut rng), lo, hi);
            pos.1 = reflect(pos.1 + step.sample(&mut rng), lo, hi);
        }
        positions.push(pos);
    }
    let apertures: Vec<f64> = audio.samples.iter().map(|&a| a as f64).collect();

    let mut frames = Array4::<f32>::zeros((t_len, cfg.height, cfg.width, 3));
    for (t, mut slot) in frames.axis_iter_mut(Axis(0)).enumerate() {
        slot.assign(&render_frame(identity, positions[t], apertures[t], cfg));
    }
    let clip = VideoClip::new(frames, audio.frame_rate)?;
    Ok((
        clip,
        SceneState {
            identity: *identity,
            positions,
            apertures,
        },
    ))
}

/// Oracle keyframe at time `t`: the identity at its base position with the
/// mouth set to the mean drive over `[t - epsilon, t + epsilon]`.
pub fn render_keyframe(
    identity: &IdentityDescriptor,
    audio: &AudioTrack,
    t: usize,
    epsilon: usize,
    cfg: &RenderConfig,
) -> Result<VideoClip> {
    if t >= audio.len() {
        return Err(invalid(format!("t = {t} outside audio of {} samples", audio.len())));
    }
    let lo = t.saturating_sub(epsilon);
    let hi = (t + epsilon).min(audio.len() - 1);
    let window = &audio.samples[lo..=hi];
    let mean = window.iter().map(|&v| v as f64).sum::<f64>() / window.len() as f64;
    let frame = render_frame(identity, identity.base_position, mean, cfg);
    Ok(VideoClip::single(frame.view(), audio.frame_rate))
}

/// The reference image: base position, mouth closed.
pub fn reference_frame(identity: &IdentityDescriptor, cfg: &RenderConfig) -> Array3<f32> {
    render_frame(identity, identity.base_position, 0.0, cfg)
}

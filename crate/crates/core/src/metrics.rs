//! Oracle-based video metrics: identity consistency, audio/aperture sync,
//! keypoint dynamic degree and sliding-window drift curves.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::stats::{fit_gaussian, frechet_distance_sq, mean, pearson, regularize, variance};
use crate::synthworld::{analyze_frame, hue_distance, AudioTrack, IdentityDescriptor, VideoClip};
use crate::{Error, Result};

const COVARIANCE_EPS: f64 = 1e-6;
/// Fewest oracle frames accepted for reference statistics.
pub const MIN_REFERENCE_FRAMES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    FirstWindow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub values: Vec<(usize, f64)>,
    pub normalization: Normalization,
    /// Set when any point needed a fallback (flagged extraction, regularised covariance).
    pub flagged: bool,
}

impl MetricSeries {
    pub fn last(&self) -> Option<f64> {
        self.values.last().map(|v| v.1)
    }

    pub fn raw_values(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.1).collect()
    }
}

/// Per-frame `0.5 * clip(1 - 4 * hue distance) + 0.5 * [shape matches]`,
/// with the mean over frames.
pub fn identity_consistency(clip: &VideoClip, reference: &IdentityDescriptor) -> (MetricSeries, f64) {
    let mut flagged = false;
    let values: Vec<(usize, f64)> = (0..clip.len())
        .map(|t| {
            let est = analyze_frame(clip.frame(t)).identity;
            flagged |= est.flagged;
            let hue = (1.0 - 4.0 * hue_distance(est.hue, reference.hue)).clamp(0.0, 1.0);
            let shape = if est.shape == reference.shape { 1.0 } else { 0.0 };
            (t, 0.5 * hue + 0.5 * shape)
        })
        .collect();
    let avg = mean(&values.iter().map(|v| v.1).collect::<Vec<_>>());
    (
        MetricSeries {
            name: "identity_consistency".into(),
            values,
            normalization: Normalization::Raw,
            flagged,
        },
        avg,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncScore {
    pub value: f64,
    /// True when either series had no variance and the score defaulted to 0.
    pub flagged: bool,
}

/// Pearson correlation between extracted aperture and the drive signal.
pub fn sync_score(clip: &VideoClip, audio: &AudioTrack) -> Result<SyncScore> {
    if clip.len() != audio.len() {
        return Err(Error::InvalidArgument(format!(
            "clip has {} frames but audio has {} samples",
            clip.len(),
            audio.len()
        )));
    }
    let apertures: Vec<f64> = (0..clip.len()).map(|t| analyze_frame(clip.frame(t)).aperture).collect();
    let drive: Vec<f64> = audio.samples.iter().map(|&v| v as f64).collect();
    Ok(match pearson(&apertures, &drive) {
        Some(r) => SyncScore {
            value: r.clamp(-1.0, 1.0),
            flagged: false,
        },
        None => SyncScore {
            value: 0.0,
            flagged: true,
        },
    })
}

/// Mean over keypoint coordinates of their variance across frames.
pub fn dynamic_degree(clip: &VideoClip) -> f64 {
    let kps: Vec<Vec<(f64, f64)>> = (0..clip.len()).map(|t| analyze_frame(clip.frame(t)).keypoints).collect();
    let k = kps[0].len();
    let mut total = 0.0;
    for j in 0..k {
        // Centred on the first frame so identical frames give exactly zero.
        let (x0, y0) = kps[0][j];
        let xs: Vec<f64> = kps.iter().map(|p| p[j].0 - x0).collect();
        let ys: Vec<f64> = kps.iter().map(|p| p[j].1 - y0).collect();
        total += variance(&xs) + variance(&ys);
    }
    total / (2 * k) as f64
}

/// Signed circular offset `a - b` wrapped into `[-0.5, 0.5)`.
pub fn hue_offset(a: f64, b: f64) -> f64 {
    (a - b + 0.5).rem_euclid(1.0) - 0.5
}

/// Reference distribution of oracle frame descriptors
/// `(hue offset, aperture, cx, cy)`. Hue is measured relative to the
/// circular mean hue of the reference frames so wrap-around cannot split it.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceStats {
    pub hue_center: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub frames: usize,
    pub regularized: bool,
}

fn circular_mean(hues: &[f64]) -> f64 {
    let (s, c) = hues.iter().fold((0.0, 0.0), |(s, c), h| {
        let a = h * std::f64::consts::TAU;
        (s + a.sin(), c + a.cos())
    });
    (s.atan2(c) / std::f64::consts::TAU).rem_euclid(1.0)
}

fn descriptor(frame: ndarray::ArrayView3<'_, f32>, hue_center: f64) -> Vec<f64> {
    let a = analyze_frame(frame);
    vec![
        hue_offset(a.identity.hue, hue_center),
        a.aperture,
        a.identity.position.0,
        a.identity.position.1,
    ]
}

impl ReferenceStats {
    pub fn fit(clips: &[VideoClip]) -> Result<Self> {
        let frames: usize = clips.iter().map(VideoClip::len).sum();
        if frames < MIN_REFERENCE_FRAMES {
            return Err(invalid(format!(
                "reference statistics need at least {MIN_REFERENCE_FRAMES} frames, got {frames}"
            )));
        }
        let hues: Vec<f64> = clips
            .iter()
            .flat_map(|c| (0..c.len()).map(move |t| analyze_frame(c.frame(t)).identity.hue))
            .collect();
        let hue_center = circular_mean(&hues);
        let samples: Vec<Vec<f64>> = clips
            .iter()
            .flat_map(|c| (0..c.len()).map(move |t| descriptor(c.frame(t), hue_center)))
            .collect();
        let (mean, mut cov) = fit_gaussian(&samples);
        let regularized = regularize(&mut cov, COVARIANCE_EPS);
        Ok(Self {
            hue_center,
            mean,
            cov,
            frames,
            regularized,
        })
    }
}

/// Sliding-window Fréchet distance to the reference statistics, windows of
/// `window_seconds` with half-window stride, divided by the first window.
pub fn drift_curve(clip: &VideoClip, reference: &ReferenceStats, window_seconds: f64) -> Result<MetricSeries> {
    if !(window_seconds > 0.0) {
        return Err(invalid(format!("window length {window_seconds} s must be positive")));
    }
    let window = ((window_seconds * clip.frame_rate as f64).round() as usize).max(2);
    let stride = (window / 2).max(1);
    if clip.len() < window + stride {
        return Err(invalid(format!(
            "clip of {} frames holds fewer than two {window}-frame windows",
            clip.len()
        )));
    }
    let descriptors: Vec<Vec<f64>> = (0..clip.len()).map(|t| descriptor(clip.frame(t), reference.hue_center)).collect();
    let mut flagged = reference.regularized;
    let mut raw = Vec::new();
    let mut start = 0;
    while start + window <= clip.len() {
        let (mu, mut cov) = fit_gaussian(&descriptors[start..start + window]);
        flagged |= regularize(&mut cov, COVARIANCE_EPS);
        raw.push((start / stride, frechet_distance_sq(&mu, &cov, &reference.mean, &reference.cov)));
        start += stride;
    }
    let first = raw[0].1;
    let denom = if first > 0.0 { first } else { f64::MIN_POSITIVE };
    flagged |= first <= 0.0;
    let mut values: Vec<(usize, f64)> = raw.iter().map(|&(i, v)| (i, v / denom)).collect();
    values[0].1 = 1.0;
    Ok(MetricSeries {
        name: "drift".into(),
        values,
        normalization: Normalization::FirstWindow,
        flagged,
    })
}

/// One line of a metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run: String,
    pub metric: String,
    pub index: i64,
    pub value: f64,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl MetricRecord {
    pub fn new(run: impl Into<String>, metric: impl Into<String>, index: i64, value: f64) -> Self {
        Self {
            run: run.into(),
            metric: metric.into(),
            index,
            value,
            flags: Vec::new(),
        }
    }

    pub fn flagged(mut self, flag: bool, name: &str) -> Self {
        if flag {
            self.flags.push(name.to_string());
        }
        self
    }
}

pub fn write_metric_log(path: &Path, records: &[MetricRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metric_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Every metric of one clip as log records.
pub fn evaluate_clip(
    run: &str,
    clip: &VideoClip,
    identity: &IdentityDescriptor,
    audio: &AudioTrack,
    reference: Option<&ReferenceStats>,
) -> Result<Vec<MetricRecord>> {
    let (series, ic) = identity_consistency(clip, identity);
    let sync = sync_score(clip, audio)?;
    let mut out = vec![
        MetricRecord::new(run, "identity_consistency", -1, ic).flagged(series.flagged, "fallback_extraction"),
        MetricRecord::new(run, "sync_score", -1, sync.value).flagged(sync.flagged, "constant_series"),
        MetricRecord::new(run, "dynamic_degree", -1, dynamic_degree(clip)),
    ];
    for (t, v) in &series.values {
        out.push(MetricRecord::new(run, "identity_frame", *t as i64, *v));
    }
    if let Some(stats) = reference {
        let drift = drift_curve(clip, stats, 1.0)?;
        for (i, v) in &drift.values {
            out.push(MetricRecord::new(run, "drift", *i as i64, *v).flagged(drift.flagged, "regularized"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::median;
    use crate::synthworld::{reference_frame, render_clip, render_clip_with, sample_identity, synth_audio, RenderConfig};

    #[test]
    fn oracle_render_scores_high_identity() {
        for seed in 0..5 {
            let id = sample_identity(seed);
            let audio = synth_audio(48, seed).unwrap();
            let (clip, _) = render_clip(&id, &audio, seed).unwrap();
            let (series, avg) = identity_consistency(&clip, &id);
            assert!(avg >= 0.97, "seed {seed}: {avg}");
            assert!(series.values.iter().all(|v| (0.0..=1.0).contains(&v.1)));
            let shifted = id.with_hue_shift(0.5);
            let (clip2, _) = render_clip(&shifted, &audio, seed).unwrap();
            assert!(identity_consistency(&clip2, &id).1 <= 0.5);
        }
        let id = sample_identity(9);
        let single = VideoClip::single(reference_frame(&id, &RenderConfig::default()).view(), 16);
        assert!(identity_consistency(&single, &id).0.values[0].1 >= 0.97);
    }

    #[test]
    fn sync_score_contract() {
        for seed in 0..5 {
            let id = sample_identity(seed);
            let audio = synth_audio(64, seed + 100).unwrap();
            let (clip, _) = render_clip(&id, &audio, seed).unwrap();
            let s = sync_score(&clip, &audio).unwrap();
            assert!(s.value >= 0.99, "seed {seed}: {}", s.value);
            let rev = sync_score(&clip, &audio.reversed()).unwrap();
            assert!(rev.value < s.value);
        }
        let id = sample_identity(1);
        let flat = AudioTrack::constant(0.4, 20, 16).unwrap();
        let (clip, _) = render_clip(&id, &flat, 1).unwrap();
        let s = sync_score(&clip, &flat).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(s.flagged);
        assert!(matches!(sync_score(&clip, &synth_audio(5, 0).unwrap()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dynamic_degree_orders_motion() {
        let id = sample_identity(4);
        let frame = reference_frame(&id, &RenderConfig::default());
        let still = VideoClip::new(ndarray::stack(ndarray::Axis(0), &[frame.view(); 6]).unwrap(), 16).unwrap();
        assert_eq!(dynamic_degree(&still), 0.0);
        assert_eq!(dynamic_degree(&VideoClip::single(frame.view(), 16)), 0.0);
        let mut wins = Vec::new();
        for seed in 0..20 {
            let id = sample_identity(seed);
            let audio = synth_audio(48, seed).unwrap();
            let go = |sigma| {
                let cfg = RenderConfig {
                    motion_sigma: sigma,
                    ..RenderConfig::default()
                };
                dynamic_degree(&render_clip_with(&id, &audio, seed, &cfg).unwrap().0)
            };
            wins.push(go(0.02) - go(0.005));
        }
        assert!(median(&wins) > 0.0);
    }

    fn reference_for(id: &IdentityDescriptor) -> ReferenceStats {
        let clips: Vec<VideoClip> = (0..4)
            .map(|k| render_clip(id, &synth_audio(48, 500 + k).unwrap(), 700 + k).unwrap().0)
            .collect();
        ReferenceStats::fit(&clips).unwrap()
    }

    #[test]
    fn drift_curve_is_flat_on_reference_and_rises_with_hue_drift() {
        let id = sample_identity(12);
        let stats = reference_for(&id);
        let audio = synth_audio(160, 3).unwrap();
        let (clip, _) = render_clip(&id, &audio, 3).unwrap();
        let curve = drift_curve(&clip, &stats, 1.0).unwrap();
        assert_eq!(curve.values[0].1, 1.0);
        assert_eq!(curve.normalization, Normalization::FirstWindow);
        let steady = curve.last().unwrap();

        let cfg = RenderConfig::default();
        let mut frames = clip.frames.clone();
        let (_, scene) = render_clip(&id, &audio, 3).unwrap();
        for t in 0..clip.len() {
            let shifted = id.with_hue_shift(0.3 * t as f64 / (clip.len() - 1) as f64);
            let f = crate::synthworld::render_frame(&shifted, scene.positions[t], scene.apertures[t], &cfg);
            frames.index_axis_mut(ndarray::Axis(0), t).assign(&f);
        }
        let drifting = VideoClip::new(frames, 16).unwrap();
        let curve = drift_curve(&drifting, &stats, 1.0).unwrap();
        assert!(curve.last().unwrap() > 1.0);
        assert!(curve.last().unwrap() > steady);
        assert!(curve.values.iter().all(|v| v.1 >= 0.0));
    }

    #[test]
    fn drift_curve_rejects_short_clips_and_thin_references() {
        let id = sample_identity(2);
        let short = render_clip(&id, &synth_audio(20, 1).unwrap(), 1).unwrap().0;
        assert!(ReferenceStats::fit(&[short.clone()]).is_err());
        let stats = reference_for(&id);
        assert!(drift_curve(&short, &stats, 1.0).is_err());
    }

    #[test]
    fn hue_offset_wraps() {
        assert!((hue_offset(0.95, 0.05) + 0.1).abs() < 1e-12);
        assert!((hue_offset(0.05, 0.95) - 0.1).abs() < 1e-12);
        assert_eq!(hue_offset(0.3, 0.3), 0.0);
    }

    #[test]
    fn metric_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let recs = vec![
            MetricRecord::new("a", "sync_score", -1, 0.5),
            MetricRecord::new("a", "drift", 3, 1.25).flagged(true, "regularized"),
        ];
        write_metric_log(&p, &recs).unwrap();
        assert_eq!(read_metric_log(&p).unwrap(), recs);
    }
}

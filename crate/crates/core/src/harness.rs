//! Experiment orchestration: the shared evaluation protocol, distance
//! sweeps, baseline comparisons, the distance probe, manifests and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchoring::{AnchorMode, AnchorSpec};
use crate::metrics::{
    drift_curve, dynamic_degree, identity_consistency, read_metric_log, sync_score, write_metric_log, MetricRecord,
    ReferenceStats,
};
use crate::model::{AnchorSampling, CheckpointMeta, Denoiser};
use crate::rollout::{generate_long_batch, two_frame_probe, NarrativeSwap, RolloutConfig, RolloutJob, RolloutOutput, Subject};
use crate::stats::median;
use crate::synthworld::{
    analyze_frame, hue_distance, reference_frame, render_clip_with, sample_identity, synth_audio_at, AudioTrack,
    IdentityDescriptor, RenderConfig,
};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const SWEEP_LOG: &str = "sweep.jsonl";
pub const COMPARE_LOG: &str = "compare.jsonl";
pub const PROBE_LOG: &str = "probe.jsonl";
pub const SUMMARY: &str = "summary.txt";

/// Shared test set: identities and audio are fixed by seeds so every arm of
/// a comparison sees the same inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub identities: usize,
    pub identity_seed: u64,
    pub audio_seed: u64,
    pub rollout_seeds: Vec<u64>,
    pub segments: usize,
    pub window: usize,
    pub denoise_steps: usize,
    pub frame_rate: u32,
    /// Lookahead distance (pixel frames) used for lookahead arms.
    pub lookahead: i64,
    /// Oracle clips per identity for drift reference statistics.
    pub reference_clips: usize,
    pub reference_frames: usize,
    pub drift_window_seconds: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            identities: 10,
            identity_seed: 1_000_000,
            audio_seed: 2_000_000,
            rollout_seeds: vec![0, 1, 2],
            segments: 10,
            window: 16,
            denoise_steps: 32,
            frame_rate: 16,
            lookahead: 12,
            reference_clips: 4,
            reference_frames: 48,
            drift_window_seconds: 1.0,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.identities == 0 || self.rollout_seeds.is_empty() {
            return fail("protocol needs at least one identity and one rollout seed");
        }
        if self.segments == 0 || self.window == 0 || self.denoise_steps == 0 {
            return fail("segments, window and denoise_steps must be positive");
        }
        if self.reference_clips * self.reference_frames < crate::metrics::MIN_REFERENCE_FRAMES {
            return fail("reference statistics need at least 100 oracle frames");
        }
        Ok(())
    }

    pub fn identity(&self, i: usize) -> IdentityDescriptor {
        sample_identity(self.identity_seed + i as u64)
    }

    pub fn audio(&self, i: usize) -> Result<AudioTrack> {
        synth_audio_at(self.segments * self.window, self.audio_seed + i as u64, self.frame_rate)
    }

    pub fn rollout_config(&self, anchor: AnchorSpec) -> RolloutConfig {
        RolloutConfig {
            denoise_steps: self.denoise_steps,
            ..RolloutConfig::new(self.segments, self.window, anchor)
        }
    }

    /// Anchor used for each comparison arm.
    pub fn anchor_for(&self, mode: AnchorMode) -> AnchorSpec {
        match mode {
            AnchorMode::Lookahead | AnchorMode::SelfKeyframe => AnchorSpec::self_keyframe(self.lookahead),
            other => AnchorSpec::with_mode(other),
        }
    }
}

fn render_config(model: &Denoiser) -> RenderConfig {
    RenderConfig {
        height: model.config().frame_height,
        width: model.config().frame_width,
        ..RenderConfig::default()
    }
}

/// Scores of one long rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutScore {
    pub identity: usize,
    pub seed: u64,
    pub identity_consistency: f64,
    pub sync_score: f64,
    pub dynamic_degree: f64,
    pub drift: Vec<f64>,
    pub drift_ratio: f64,
    /// Median circular hue distance per segment to the last scheduled
    /// anchor target (the subject's own hue without a narrative schedule).
    pub segment_hue_distance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: Vec<RolloutScore>,
    pub identity_consistency: f64,
    pub sync_score: f64,
    pub dynamic_degree: f64,
    pub drift_ratio: f64,
}

impl EvalSummary {
    fn from_rows(rows: Vec<RolloutScore>) -> Self {
        let pick = |f: fn(&RolloutScore) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>());
        Self {
            identity_consistency: pick(|r| r.identity_consistency),
            sync_score: pick(|r| r.sync_score),
            dynamic_degree: pick(|r| r.dynamic_degree),
            drift_ratio: pick(|r| r.drift_ratio),
            rows,
        }
    }

    /// Medians over rollout seeds of each identity's score, keyed by identity.
    pub fn per_identity(&self, f: fn(&RolloutScore) -> f64) -> BTreeMap<usize, f64> {
        let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(r.identity).or_default().push(f(r));
        }
        groups.into_iter().map(|(k, v)| (k, median(&v))).collect()
    }

    /// Per-seed medians (over identities) of an arbitrary row statistic.
    pub fn per_seed_values(&self, f: impl Fn(&RolloutScore) -> f64) -> Vec<f64> {
        let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(r.seed).or_default().push(f(r));
        }
        groups.into_values().map(|v| median(&v)).collect()
    }

    /// Medians over identities of each rollout seed's score, keyed by seed.
    pub fn per_seed(&self, f: fn(&RolloutScore) -> f64) -> BTreeMap<u64, f64> {
        let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(r.seed).or_default().push(f(r));
        }
        groups.into_iter().map(|(k, v)| (k, median(&v))).collect()
    }
}

fn reference_stats(identity: &IdentityDescriptor, protocol: &Protocol, render: &RenderConfig, i: usize) -> Result<ReferenceStats> {
    let clips = (0..protocol.reference_clips)
        .map(|k| {
            let seed = protocol.audio_seed ^ 0x00C0_FFEE ^ ((i * 97 + k) as u64);
            let audio = synth_audio_at(protocol.reference_frames, seed, protocol.frame_rate)?;
            Ok(render_clip_with(identity, &audio, seed, render)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    ReferenceStats::fit(&clips)
}

fn score(
    out: &RolloutOutput,
    identity: &IdentityDescriptor,
    audio: &AudioTrack,
    stats: &ReferenceStats,
    protocol: &Protocol,
    target: f64,
) -> Result<(f64, f64, f64, Vec<f64>, Vec<f64>)> {
    let (_, ic) = identity_consistency(&out.video, identity);
    let sync = sync_score(&out.video, &out.aligned_audio(audio)?)?.value;
    let dd = dynamic_degree(&out.video);
    let drift = drift_curve(&out.video, stats, protocol.drift_window_seconds)?.raw_values();
    let hues: Vec<f64> = (0..protocol.segments)
        .map(|s| {
            let d: Vec<f64> = (s * protocol.window..(s + 1) * protocol.window)
                .map(|t| hue_distance(analyze_frame(out.video.frame(t)).identity.hue, target))
                .collect();
            median(&d)
        })
        .collect();
    Ok((ic, sync, dd, drift, hues))
}

/// Runs the protocol's rollouts for one anchor configuration and scores them.
pub fn evaluate_with(model: &Denoiser, config: &RolloutConfig, protocol: &Protocol) -> Result<EvalSummary> {
    protocol.validate()?;
    let render = render_config(model);
    let identities: Vec<IdentityDescriptor> = (0..protocol.identities).map(|i| protocol.identity(i)).collect();
    let audios = (0..protocol.identities).map(|i| protocol.audio(i)).collect::<Result<Vec<_>>>()?;
    let subjects: Vec<Subject> = identities.iter().map(|id| Subject::from_identity(id, &render)).collect();
    let stats = identities
        .iter()
        .enumerate()
        .map(|(i, id)| reference_stats(id, protocol, &render, i))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    let mut keys = Vec::new();
    for i in 0..protocol.identities {
        for &seed in &protocol.rollout_seeds {
            jobs.push(RolloutJob {
                subject: &subjects[i],
                audio: &audios[i],
                seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            });
            keys.push((i, seed));
        }
    }
    let outputs = generate_long_batch(config, model, &jobs)?;
    let mut rows = Vec::with_capacity(outputs.len());
    for ((i, seed), out) in keys.into_iter().zip(&outputs) {
        let target = config
            .narrative_schedule
            .iter()
            .max_by_key(|n| n.segment)
            .map_or(identities[i].hue, |n| n.identity.hue);
        let (ic, sync, dd, drift, hues) = score(out, &identities[i], &audios[i], &stats[i], protocol, target)?;
        let ratio = drift.last().copied().unwrap_or(1.0) / drift[0];
        rows.push(RolloutScore {
            identity: i,
            seed,
            identity_consistency: ic,
            sync_score: sync,
            dynamic_degree: dd,
            drift,
            drift_ratio: ratio,
            segment_hue_distance: hues,
        });
    }
    Ok(EvalSummary::from_rows(rows))
}

pub fn evaluate(model: &Denoiser, anchor: &AnchorSpec, protocol: &Protocol) -> Result<EvalSummary> {
    evaluate_with(model, &protocol.rollout_config(anchor.clone()), protocol)
}

/// Narrative run: from `swap_segment` on, each identity's anchor shows the
/// same character with its hue rotated by `hue_shift`.
pub fn evaluate_narrative(model: &Denoiser, protocol: &Protocol, swap_segment: usize, hue_shift: f64) -> Result<EvalSummary> {
    let mut summaries = Vec::new();
    for i in 0..protocol.identities {
        let single = Protocol {
            identities: 1,
            identity_seed: protocol.identity_seed + i as u64,
            audio_seed: protocol.audio_seed + i as u64,
            ..protocol.clone()
        };
        let mut cfg = protocol.rollout_config(AnchorSpec::self_keyframe(protocol.lookahead));
        cfg.narrative_schedule.push(NarrativeSwap {
            segment: swap_segment,
            identity: protocol.identity(i).with_hue_shift(hue_shift),
        });
        let mut s = evaluate_with(model, &cfg, &single)?;
        for r in &mut s.rows {
            r.identity = i;
        }
        summaries.extend(s.rows);
    }
    Ok(EvalSummary::from_rows(summaries))
}

fn refuse_untrained(meta: &CheckpointMeta) -> Result<()> {
    if meta.trained_steps == 0 {
        return Err(Error::Refused(
            "checkpoint has 0 trained steps; train it before sweeping or comparing".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lookahead: i64,
    pub identity_consistency: f64,
    pub dynamic_degree: f64,
    pub sync_score: f64,
    pub rollouts: usize,
    pub summary: EvalSummary,
}

/// Self-keyframed rollouts at every lookahead distance in `d_list` (pixel frames).
pub fn sweep_distance(model: &Denoiser, meta: &CheckpointMeta, d_list: &[i64], protocol: &Protocol) -> Result<Vec<SweepRow>> {
    refuse_untrained(meta)?;
    let sampling = meta.info.get("anchor_sampling").and_then(|v| v.as_str());
    if sampling == Some("fixed") {
        return Err(Error::Refused("distance sweeps need a checkpoint trained with flexible anchoring".into()));
    }
    if let Some(mode) = meta.anchor_mode {
        if !matches!(mode, AnchorMode::Lookahead | AnchorMode::SelfKeyframe) {
            return Err(Error::Refused(format!(
                "distance sweeps need a lookahead checkpoint, this one was trained in {} mode",
                mode.name()
            )));
        }
    }
    let r = model.config().ratio as i64;
    if let Some(bad) = d_list.iter().find(|&&d| d < r.max(1)) {
        return Err(Error::InvalidArgument(format!("lookahead {bad} must be >= max(1, r = {r})")));
    }
    d_list
        .iter()
        .map(|&d| {
            let summary = evaluate(model, &AnchorSpec::self_keyframe(d), protocol)?;
            log::info!("sweep D = {d}: identity {:.4} sync {:.4}", summary.identity_consistency, summary.sync_score);
            Ok(SweepRow {
                lookahead: d,
                identity_consistency: summary.identity_consistency,
                dynamic_degree: summary.dynamic_degree,
                sync_score: summary.sync_score,
                rollouts: summary.rows.len(),
                summary,
            })
        })
        .collect()
}

pub fn sweep_records(rows: &[SweepRow]) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    for r in rows {
        out.push(MetricRecord::new("sweep", "identity_consistency", r.lookahead, r.identity_consistency));
        out.push(MetricRecord::new("sweep", "dynamic_degree", r.lookahead, r.dynamic_degree));
        out.push(MetricRecord::new("sweep", "sync_score", r.lookahead, r.sync_score));
        out.push(MetricRecord::new("sweep", "rollouts", r.lookahead, r.rollouts as f64));
    }
    out
}

/// A checkpoint taking part in a comparison.
pub struct Arm<'a> {
    pub mode: AnchorMode,
    pub model: &'a Denoiser,
    pub meta: &'a CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub mode: AnchorMode,
    pub identity_consistency: f64,
    pub sync_score: f64,
    pub dynamic_degree: f64,
    pub drift_ratio: f64,
    /// Median drift curve over rollouts.
    pub drift: Vec<f64>,
    pub summary: EvalSummary,
}

pub fn compare_baselines(arms: &[Arm<'_>], protocol: &Protocol) -> Result<Vec<BaselineRow>> {
    arms.iter()
        .map(|arm| {
            refuse_untrained(arm.meta)?;
            let summary = evaluate(arm.model, &protocol.anchor_for(arm.mode), protocol)?;
            let windows = summary.rows.iter().map(|r| r.drift.len()).min().unwrap_or(0);
            let drift: Vec<f64> = (0..windows)
                .map(|w| median(&summary.rows.iter().map(|r| r.drift[w] / r.drift[0]).collect::<Vec<_>>()))
                .collect();
            log::info!(
                "compare {}: identity {:.4} drift ratio {:.4}",
                arm.mode.name(),
                summary.identity_consistency,
                summary.drift_ratio
            );
            Ok(BaselineRow {
                mode: arm.mode,
                identity_consistency: summary.identity_consistency,
                sync_score: summary.sync_score,
                dynamic_degree: summary.dynamic_degree,
                drift_ratio: summary.drift_ratio,
                drift,
                summary,
            })
        })
        .collect()
}

pub fn compare_records(rows: &[BaselineRow]) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    for r in rows {
        let run = r.mode.name();
        out.push(MetricRecord::new(run, "identity_consistency", -1, r.identity_consistency));
        out.push(MetricRecord::new(run, "sync_score", -1, r.sync_score));
        out.push(MetricRecord::new(run, "dynamic_degree", -1, r.dynamic_degree));
        out.push(MetricRecord::new(run, "drift_ratio", -1, r.drift_ratio));
        for (i, v) in r.drift.iter().enumerate() {
            out.push(MetricRecord::new(run, "drift", i as i64, *v));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub gap: usize,
    pub median_motion: f64,
    pub motions: Vec<f64>,
}

/// Two-frame probe over `seeds` random identities.
pub fn run_probe(model: &Denoiser, meta: &CheckpointMeta, gaps: &[usize], seeds: usize, base_seed: u64) -> Result<Vec<ProbeRow>> {
    refuse_untrained(meta)?;
    let render = render_config(model);
    let window = model.config().window;
    let mut motions: Vec<Vec<f64>> = vec![Vec::with_capacity(seeds); gaps.len()];
    for s in 0..seeds as u64 {
        let id = sample_identity(base_seed + s);
        let audio = synth_audio_at(window, base_seed + s, crate::synthworld::DEFAULT_FRAME_RATE)?;
        let cond = reference_frame(&id, &render);
        for (k, p) in two_frame_probe(model, &cond, &audio, gaps, base_seed + s)?.into_iter().enumerate() {
            motions[k].push(p.motion);
        }
    }
    Ok(gaps
        .iter()
        .zip(motions)
        .map(|(&gap, m)| ProbeRow {
            gap,
            median_motion: median(&m),
            motions: m,
        })
        .collect())
}

pub fn probe_records(rows: &[ProbeRow]) -> Vec<MetricRecord> {
    rows.iter()
        .map(|r| MetricRecord::new("probe", "median_motion", r.gap as i64, r.median_motion))
        .collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRef {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hash_file(path)?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub id: String,
    pub config_hashes: BTreeMap<String, String>,
    pub dataset_manifest: Option<FileRef>,
    pub checkpoints: Vec<FileRef>,
    pub metric_logs: Vec<FileRef>,
    pub protocol: Option<Protocol>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl ExperimentManifest {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ..Self::default()
        }
    }

    fn resolve(root: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    }

    fn refs(&self) -> impl Iterator<Item = &FileRef> {
        self.dataset_manifest.iter().chain(&self.checkpoints).chain(&self.metric_logs)
    }

    /// Every referenced file exists and still has its recorded hash.
    pub fn verify(&self, root: &Path) -> Result<()> {
        let missing: Vec<PathBuf> = self
            .refs()
            .map(|r| Self::resolve(root, &r.path))
            .filter(|p| !p.exists())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingInputs(missing));
        }
        for r in self.refs() {
            let p = Self::resolve(root, &r.path);
            if hash_file(&p)? != r.sha256 {
                return Err(Error::Format {
                    path: p,
                    reason: "content hash differs from the manifest".into(),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|_| Error::MissingInputs(vec![path.clone()]))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes a metric log into `dir` and records it in the experiment manifest
/// (created on first use).
pub fn record_log(dir: &Path, name: &str, records: &[MetricRecord]) -> Result<PathBuf> {
    let path = dir.join(name);
    write_metric_log(&path, records)?;
    let mut manifest = ExperimentManifest::load(dir).unwrap_or_else(|_| {
        ExperimentManifest::new(dir.file_name().map_or("experiment".into(), |n| n.to_string_lossy().into_owned()))
    });
    manifest.metric_logs.retain(|r| r.path != Path::new(name));
    manifest.metric_logs.push(FileRef {
        path: PathBuf::from(name),
        sha256: hash_file(&path)?,
    });
    manifest.metric_logs.sort_by(|a, b| a.path.cmp(&b.path));
    manifest.save(dir)?;
    Ok(path)
}

type Series = (String, Vec<(f64, f64)>);

fn plot_lines(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[Series]) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(e.to_string());
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let (y0, y1) = (y0 - pad, y1 + pad);

    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

fn group(records: &[MetricRecord]) -> BTreeMap<(String, String), Vec<(i64, f64)>> {
    let mut out: BTreeMap<(String, String), Vec<(i64, f64)>> = BTreeMap::new();
    for r in records {
        out.entry((r.run.clone(), r.metric.clone())).or_default().push((r.index, r.value));
    }
    for v in out.values_mut() {
        v.sort_by_key(|p| p.0);
    }
    out
}

/// Lookahead with the highest sync score in a sweep log.
pub fn sync_argmax(records: &[MetricRecord]) -> Option<i64> {
    records
        .iter()
        .filter(|r| r.run == "sweep" && r.metric == "sync_score")
        .max_by(|a, b| a.value.total_cmp(&b.value).then(b.index.cmp(&a.index)))
        .map(|r| r.index)
}

/// Renders plots and `summary.txt` from the metric logs in `dir`.
/// Outputs depend only on the logs, so reruns rewrite identical bytes.
pub fn report(dir: &Path) -> Result<Vec<PathBuf>> {
    let known = [SWEEP_LOG, COMPARE_LOG, PROBE_LOG];
    if let Ok(manifest) = ExperimentManifest::load(dir) {
        let missing: Vec<PathBuf> = manifest
            .metric_logs
            .iter()
            .map(|r| ExperimentManifest::resolve(dir, &r.path))
            .filter(|p| !p.exists())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingInputs(missing));
        }
    }
    let present: Vec<&str> = known.iter().copied().filter(|k| dir.join(k).exists()).collect();
    if present.is_empty() {
        return Err(Error::MissingInputs(known.iter().map(|k| dir.join(k)).collect()));
    }
    let mut files = Vec::new();
    let mut summary = String::new();
    writeln!(summary, "experiment: {}", dir.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned())).ok();

    if present.contains(&SWEEP_LOG) {
        let records = read_metric_log(&dir.join(SWEEP_LOG))?;
        let g = group(&records);
        writeln!(summary, "\n== lookahead sweep ==").ok();
        writeln!(summary, "{:>6} {:>12} {:>12} {:>12}", "D", "identity", "dynamic", "sync").ok();
        let col = |m: &str| g.get(&("sweep".to_string(), m.to_string())).cloned().unwrap_or_default();
        let (ic, dd, sy) = (col("identity_consistency"), col("dynamic_degree"), col("sync_score"));
        for (k, (d, v)) in ic.iter().enumerate() {
            let dyn_v = dd.get(k).map_or(f64::NAN, |p| p.1);
            let sync_v = sy.get(k).map_or(f64::NAN, |p| p.1);
            writeln!(summary, "{d:>6} {v:>12.4} {dyn_v:>12.6} {sync_v:>12.4}").ok();
        }
        if let Some(best) = sync_argmax(&records) {
            writeln!(summary, "sync_score argmax D = {best}").ok();
        }
        for (metric, file, label) in [
            ("identity_consistency", "sweep_identity.svg", "identity consistency"),
            ("dynamic_degree", "sweep_dynamic.svg", "dynamic degree"),
            ("sync_score", "sweep_sync.svg", "sync score"),
        ] {
            let pts: Vec<(f64, f64)> = col(metric).iter().map(|&(d, v)| (d as f64, v)).collect();
            let path = dir.join(file);
            plot_lines(&path, &format!("{label} vs lookahead"), "lookahead D (frames)", label, &[(label.to_string(), pts)])?;
            files.push(path);
        }
    }

    if present.contains(&COMPARE_LOG) {
        let records = read_metric_log(&dir.join(COMPARE_LOG))?;
        let g = group(&records);
        let runs: Vec<String> = g.keys().map(|k| k.0.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        writeln!(summary, "\n== baselines ==").ok();
        writeln!(summary, "{:>14} {:>12} {:>12} {:>12} {:>12}", "mode", "identity", "sync", "dynamic", "drift_ratio").ok();
        let scalar = |run: &str, m: &str| g.get(&(run.to_string(), m.to_string())).and_then(|v| v.first()).map_or(f64::NAN, |p| p.1);
        let mut curves = Vec::new();
        for run in &runs {
            writeln!(
                summary,
                "{run:>14} {:>12.4} {:>12.4} {:>12.6} {:>12.4}",
                scalar(run, "identity_consistency"),
                scalar(run, "sync_score"),
                scalar(run, "dynamic_degree"),
                scalar(run, "drift_ratio")
            )
            .ok();
            if let Some(c) = g.get(&(run.clone(), "drift".to_string())) {
                curves.push((run.clone(), c.iter().map(|&(i, v)| (i as f64, v)).collect()));
            }
        }
        let path = dir.join("drift.svg");
        plot_lines(&path, "drift (normalised to first window)", "window", "relative Frechet distance", &curves)?;
        files.push(path);
    }

    if present.contains(&PROBE_LOG) {
        let records = read_metric_log(&dir.join(PROBE_LOG))?;
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.metric == "median_motion")
            .map(|r| (r.index as f64, r.value))
            .collect();
        writeln!(summary, "\n== two-frame probe ==").ok();
        for (g, m) in &pts {
            writeln!(summary, "gap {g:>4}: median motion {m:.5}").ok();
        }
        let path = dir.join("probe.svg");
        plot_lines(&path, "motion vs condition gap", "gap (latent frames)", "median keypoint motion", &[("motion".into(), pts)])?;
        files.push(path);
    }

    let path = dir.join(SUMMARY);
    fs::write(&path, summary)?;
    files.push(path);
    Ok(files)
}

/// Parameters of a single `rollout` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRun {
    #[serde(flatten)]
    pub rollout: RolloutConfig,
    #[serde(default)]
    pub identity_seed: u64,
    #[serde(default)]
    pub identity: Option<IdentityDescriptor>,
    #[serde(default)]
    pub audio_seed: u64,
}

impl RolloutRun {
    pub fn identity(&self) -> IdentityDescriptor {
        self.identity.unwrap_or_else(|| sample_identity(self.identity_seed))
    }
}

/// What `rollout` writes next to the video: enough to re-run and to score it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutManifest {
    pub checkpoint: FileRef,
    pub video: FileRef,
    pub config: RolloutRun,
    pub identity: IdentityDescriptor,
    pub frame_rate: u32,
    /// Audio aligned to the output frames.
    pub audio: Vec<f32>,
    pub source_frames: Vec<usize>,
    pub segments: Vec<crate::rollout::SegmentRecord>,
}

/// The fields `eval` needs from either a dataset clip's metadata or a
/// rollout manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub identity: IdentityDescriptor,
    pub audio: Vec<f32>,
    pub frame_rate: u32,
}

/// Scores one video against its metadata; drift uses oracle renders of the
/// same identity as reference.
pub fn eval_video(run: &str, clip: &crate::synthworld::VideoClip, meta: &EvalMeta) -> Result<Vec<MetricRecord>> {
    let audio = AudioTrack::new(meta.audio.clone(), meta.frame_rate)?;
    let protocol = Protocol {
        frame_rate: meta.frame_rate,
        ..Protocol::default()
    };
    let render = RenderConfig {
        height: clip.height(),
        width: clip.width(),
        ..RenderConfig::default()
    };
    let stats = reference_stats(&meta.identity, &protocol, &render, 0)?;
    let window = (protocol.drift_window_seconds * meta.frame_rate as f64).round() as usize;
    let drift = (clip.len() >= window + window / 2).then_some(&stats);
    crate::metrics::evaluate_clip(run, clip, &meta.identity, &audio, drift)
}

/// One acceptance line.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            pass,
            detail,
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub const SIGNIFICANCE: f64 = 0.05;

/// Paired one-sided sign test over matching (identity, seed) rollouts:
/// wins are rows where `a` beats `b` in the stated direction, ties dropped.
pub fn paired_sign_test(a: &EvalSummary, b: &EvalSummary, f: fn(&RolloutScore) -> f64, greater: bool) -> (u64, u64, f64) {
    let lookup: BTreeMap<(usize, u64), f64> = b.rows.iter().map(|r| ((r.identity, r.seed), f(r))).collect();
    let (mut wins, mut trials) = (0, 0);
    for r in &a.rows {
        if let Some(&other) = lookup.get(&(r.identity, r.seed)) {
            let x = f(r);
            if x != other {
                trials += 1;
                if (x > other) == greater {
                    wins += 1;
                }
            }
        }
    }
    (wins, trials, crate::stats::sign_test_p(wins, trials))
}

/// Lookahead beats no anchoring on identity (higher) and drift (lower ratio).
pub fn check_drift_reduction(lookahead: &EvalSummary, none: &EvalSummary) -> Vec<Check> {
    let (w, n, p) = paired_sign_test(lookahead, none, |r| r.identity_consistency, true);
    let a = Check::new(
        "drift.identity",
        lookahead.identity_consistency > none.identity_consistency && p < SIGNIFICANCE,
        format!(
            "median identity lookahead {:.4} vs none {:.4}; sign test {w}/{n} p = {p:.3e}",
            lookahead.identity_consistency, none.identity_consistency
        ),
    );
    let (w, n, p) = paired_sign_test(lookahead, none, |r| r.drift_ratio, false);
    let b = Check::new(
        "drift.ratio",
        lookahead.drift_ratio < none.drift_ratio && p < SIGNIFICANCE,
        format!(
            "median final/first drift lookahead {:.4} vs none {:.4}; sign test {w}/{n} p = {p:.3e}",
            lookahead.drift_ratio, none.drift_ratio
        ),
    );
    vec![a, b]
}

/// Distance trade-off: dynamics rise and identity falls with D, sync peaks inside.
pub fn check_sweep(rows: &[SweepRow]) -> Vec<Check> {
    use crate::stats::{spearman, spearman_p_one_sided};
    let d: Vec<f64> = rows.iter().map(|r| r.lookahead as f64).collect();
    let dd: Vec<f64> = rows.iter().map(|r| r.dynamic_degree).collect();
    let ic: Vec<f64> = rows.iter().map(|r| r.identity_consistency).collect();
    let (rho_d, p_d) = (spearman(&d, &dd), spearman_p_one_sided(&d, &dd, true));
    let (rho_i, p_i) = (spearman(&d, &ic), spearman_p_one_sided(&d, &ic, false));
    let records = sweep_records(rows);
    let best = sync_argmax(&records);
    let (lo, hi) = (rows.iter().map(|r| r.lookahead).min(), rows.iter().map(|r| r.lookahead).max());
    let interior = matches!((best, lo, hi), (Some(b), Some(l), Some(h)) if b > l && b < h);
    vec![
        Check::new(
            "sweep.dynamic",
            rho_d > 0.0 && p_d < SIGNIFICANCE,
            format!("Spearman(D, dynamic) = {rho_d:.3}, p = {p_d:.4}"),
        ),
        Check::new(
            "sweep.identity",
            rho_i < 0.0 && p_i < SIGNIFICANCE,
            format!("Spearman(D, identity) = {rho_i:.3}, p = {p_i:.4}"),
        ),
        Check::new(
            "sweep.sync_peak",
            interior,
            format!("sync argmax D = {best:?} over [{lo:?}, {hi:?}]"),
        ),
    ]
}

pub fn check_probe(rows: &[ProbeRow]) -> Check {
    use crate::stats::{spearman, spearman_p_one_sided};
    let g: Vec<f64> = rows.iter().map(|r| r.gap as f64).collect();
    let m: Vec<f64> = rows.iter().map(|r| r.median_motion).collect();
    let rho = spearman(&g, &m);
    let p = spearman_p_one_sided(&g, &m, true);
    Check::new(
        "probe.motion",
        rho > 0.0,
        format!("Spearman(gap, median motion) = {rho:.3} (one-sided p = {p:.4}); medians {m:.4?}"),
    )
}

/// Hue distance to the new target falls over the swap segment and the one after.
pub fn check_narrative(summary: &EvalSummary, swap_segment: usize) -> Check {
    let segments = summary.rows.first().map_or(0, |r| r.segment_hue_distance.len());
    let per_segment: Vec<f64> = (0..segments)
        .map(|k| median(&summary.per_seed_values(|r| r.segment_hue_distance[k])))
        .collect();
    let ok = swap_segment >= 1
        && swap_segment + 1 < segments
        && per_segment[swap_segment - 1] > per_segment[swap_segment]
        && per_segment[swap_segment] > per_segment[swap_segment + 1];
    Check::new(
        "narrative.hue",
        ok,
        format!("median hue distance to new target per segment {per_segment:.3?} (swap at {swap_segment})"),
    )
}

/// Which sampling a checkpoint was trained with, if recorded.
pub fn checkpoint_sampling(meta: &CheckpointMeta) -> Option<AnchorSampling> {
    serde_json::from_value(meta.info.get("anchor_sampling")?.clone()).ok()
}

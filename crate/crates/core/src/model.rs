//! Tiny audio-conditional diffusion transformer.
//!
//! Tokens enter through one of two projections: noisy window tokens through
//! the input projection, clean conditioning tokens (appended anchors and
//! replaced window latents) through `phi`, which starts as an exact copy of
//! the input projection. Positional, diffusion-time and per-frame audio
//! embeddings are added, then a stack of pre-norm blocks with full attention
//! predicts the rectified-flow velocity for every window token.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anchoring::{assemble_sequence, Anchor, AnchorMode};
use crate::error::invalid;
use crate::latentspace::{LatentSequence, PeMode, PositionalEmbeddingTable, TokenSequence};
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 7] = b"LACKPT1";
const CHECKPOINT_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;
/// Floor on the diffusion time when turning a clean-patch estimate into a velocity.
pub const TAU_MIN: f32 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub audio_dim: usize,
    pub pe_mode: PeMode,
    /// Temporal compression ratio `r`.
    pub ratio: usize,
    /// Segment length `L` in pixel frames.
    pub window: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Latent frames replaced by starting frames (`s_lat`).
    pub starting_latents: usize,
    pub time_dim: usize,
    pub audio_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            token_dim: 192,
            blocks: 6,
            heads: 6,
            mlp_ratio: 4,
            patch: 4,
            audio_dim: 16,
            pe_mode: PeMode::SinusoidalDistant,
            ratio: 1,
            window: 16,
            frame_height: 32,
            frame_width: 32,
            starting_latents: 1,
            time_dim: 32,
            audio_hidden: 32,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains in minutes on one CPU core:
    /// r = 4 and 8x8 patches give 16 tokens per latent frame.
    pub fn desk() -> Self {
        Self {
            token_dim: 64,
            blocks: 3,
            heads: 4,
            patch: 8,
            ratio: 4,
            ..Self::default()
        }
    }

    /// Two-block configuration small enough for finite differences.
    pub fn micro() -> Self {
        Self {
            token_dim: 12,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            patch: 2,
            audio_dim: 4,
            ratio: 1,
            window: 2,
            frame_height: 4,
            frame_width: 4,
            time_dim: 4,
            audio_hidden: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return fail(format!("token_dim {} not divisible by heads {}", self.token_dim, self.heads));
        }
        if self.ratio == 0 || self.window % self.ratio != 0 || self.window == 0 {
            return fail(format!("window {} must be a positive multiple of r = {}", self.window, self.ratio));
        }
        if self.patch == 0 || self.frame_height % self.patch != 0 || self.frame_width % self.patch != 0 {
            return fail(format!(
                "frame {}x{} not divisible by patch {}",
                self.frame_height, self.frame_width, self.patch
            ));
        }
        if self.starting_latents >= self.latent_frames() {
            return fail(format!(
                "starting latents {} must be fewer than window latents {}",
                self.starting_latents,
                self.latent_frames()
            ));
        }
        if self.blocks == 0 || self.mlp_ratio == 0 || self.audio_dim == 0 || self.audio_hidden == 0 {
            return fail("blocks, mlp_ratio, audio_dim and audio_hidden must be positive".into());
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return fail(format!("time_dim {} must be positive and even", self.time_dim));
        }
        PositionalEmbeddingTable::for_width(self.pe_mode, self.token_dim).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    /// Window latent frames `n = L / r`.
    pub fn latent_frames(&self) -> usize {
        self.window / self.ratio
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.frame_height / self.patch) * (self.frame_width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3 * self.ratio
    }

    /// Pixel frames covered by the starting latents.
    pub fn starting_frames(&self) -> usize {
        self.starting_latents * self.ratio
    }
}

/// Pixel latents live in `[0, 1]`; the network works on `[-1, 1]`.
pub fn to_model_space(x: f32) -> f32 {
    2.0 * x - 1.0
}

pub fn from_model_space(x: f32) -> f32 {
    (x + 1.0) / 2.0
}

/// `[sin(s * w_i), cos(s * w_i)]` of `s = 1000 tau`.
pub fn time_features(tau: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let s = tau as f64 * 1000.0;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        out[i] = (s * freq).sin() as f32;
        out[half + i] = (s * freq).cos() as f32;
    }
    out
}

/// One denoiser input: token values already in model space, the window's
/// audio samples (`L` of them) and the diffusion time of the noisy tokens.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseItem<'a> {
    pub seq: &'a TokenSequence,
    pub audio: &'a [f32],
    pub tau: f32,
}

#[derive(Debug)]
pub struct Denoiser {
    config: ModelConfig,
    dtype: DType,
    device: Device,
    pe: PositionalEmbeddingTable,
    params: BTreeMap<String, Var>,
}

struct Init<'a> {
    rng: &'a mut rand_chacha::ChaCha8Rng,
    dtype: DType,
    device: &'a Device,
    params: BTreeMap<String, Var>,
}

impl Init<'_> {
    fn put(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<()> {
        let t = Tensor::from_vec(data, shape, self.device)?.to_dtype(self.dtype)?;
        self.params.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let count = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        let data = (0..count).map(|_| dist.sample(self.rng)).collect();
        self.put(name, data, shape)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.put(name, vec![value; shape.iter().product()], shape)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, scale: f64) -> Result<()> {
        self.normal(&format!("{name}.w"), &[fan_in, fan_out], scale / (fan_in as f64).sqrt())?;
        self.constant(&format!("{name}.b"), &[fan_out], 0.0)
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<()> {
        self.constant(&format!("{name}.g"), &[dim], 1.0)?;
        self.constant(&format!("{name}.b"), &[dim], 0.0)
    }
}

impl Denoiser {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let device = Device::Cpu;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w = config.token_dim;
        let hidden = w * config.mlp_ratio;
        let residual_scale = 1.0 / (2.0 * config.blocks as f64).sqrt();
        let mut init = Init {
            rng: &mut rng,
            dtype,
            device: &device,
            params: BTreeMap::new(),
        };
        init.linear("in", config.patch_dim(), w, 1.0)?;
        init.linear("time.l1", config.time_dim, w, 1.0)?;
        init.linear("time.l2", w, w, 1.0)?;
        init.linear("audio.l1", config.ratio, config.audio_hidden, 1.0)?;
        init.linear("audio.l2", config.audio_hidden, config.audio_dim, 1.0)?;
        init.linear("audio.out", config.audio_dim, w, 1.0)?;
        for b in 0..config.blocks {
            init.norm(&format!("blk{b}.ln1"), w)?;
            for p in ["q", "k", "v"] {
                init.linear(&format!("blk{b}.{p}"), w, w, 1.0)?;
            }
            init.linear(&format!("blk{b}.o"), w, w, residual_scale)?;
            init.norm(&format!("blk{b}.ln2"), w)?;
            init.linear(&format!("blk{b}.mlp1"), w, hidden, 1.0)?;
            init.linear(&format!("blk{b}.mlp2"), hidden, w, residual_scale)?;
        }
        init.norm("final.ln", w)?;
        init.linear("out", w, config.patch_dim(), 0.5)?;
        let pe = PositionalEmbeddingTable::for_width(config.pe_mode, w)?;
        if config.pe_mode == PeMode::LearnableTime {
            init.constant("pe.time", &[pe.dims.2], 0.0)?;
        }
        let mut params = init.params;
        // phi starts as a bit-exact copy of the noisy-path projection.
        for suffix in ["w", "b"] {
            let src = params[&format!("in.{suffix}")].as_tensor().copy()?;
            params.insert(format!("phi.{suffix}"), Var::from_tensor(&src)?);
        }
        Ok(Self {
            config,
            dtype,
            device,
            pe,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn pe_table(&self) -> &PositionalEmbeddingTable {
        &self.pe
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Flattened host copy of one parameter.
    pub fn param_values(&self, name: &str) -> Result<Vec<f64>> {
        let var = self.params.get(name).ok_or_else(|| invalid(format!("no parameter named {name}")))?;
        Ok(var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    pub fn set_param_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self.params.get(name).ok_or_else(|| invalid(format!("no parameter named {name}")))?;
        if values.len() != var.elem_count() {
            return Err(invalid(format!("{name}: expected {} values, got {}", var.elem_count(), values.len())));
        }
        let t = Tensor::from_vec(values.to_vec(), var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Learned anchor temporal embedding, when the PE mode has one.
    pub fn learned_time(&self) -> Result<Option<Vec<f32>>> {
        match self.params.get("pe.time") {
            Some(v) => Ok(Some(v.as_tensor().to_dtype(DType::F32)?.to_vec1::<f32>()?)),
            None => Ok(None),
        }
    }

    fn p(&self, name: &str, track: bool) -> Tensor {
        let t = self.params[name].as_tensor();
        if track {
            t.clone()
        } else {
            t.detach()
        }
    }

    fn host(&self, data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn linear(&self, x: &Tensor, name: &str, track: bool) -> Result<Tensor> {
        let w = self.p(&format!("{name}.w"), track);
        let b = self.p(&format!("{name}.b"), track);
        let dims = x.dims().to_vec();
        let last = *dims.last().expect("linear input has a feature axis");
        let rows = x.elem_count() / last;
        let y = x.reshape((rows, last))?.matmul(&w)?.broadcast_add(&b)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("nonempty") = w.dims()[1];
        Ok(y.reshape(out_dims)?)
    }

    fn layer_norm(&self, x: &Tensor, name: &str, track: bool) -> Result<Tensor> {
        let g = self.p(&format!("{name}.g"), track);
        let b = self.p(&format!("{name}.b"), track);
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&var.affine(1.0, LN_EPS)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&g)?.broadcast_add(&b)?)
    }

    fn attention(&self, x: &Tensor, blk: usize, track: bool) -> Result<Tensor> {
        let (b, n, w) = x.dims3()?;
        let h = self.config.heads;
        let dh = w / h;
        let split = |t: Tensor| -> Result<Tensor> { Ok(t.reshape((b, n, h, dh))?.transpose(1, 2)?.contiguous()?) };
        let q = split(self.linear(x, &format!("blk{blk}.q"), track)?)?;
        let k = split(self.linear(x, &format!("blk{blk}.k"), track)?)?;
        let v = split(self.linear(x, &format!("blk{blk}.v"), track)?)?;
        let scores = q.matmul(&k.t()?.contiguous()?)?.affine(1.0 / (dh as f64).sqrt(), 0.0)?;
        let att = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let o = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, w))?;
        self.linear(&o, &format!("blk{blk}.o"), track)
    }

    fn block(&self, x: &Tensor, blk: usize, track: bool) -> Result<Tensor> {
        let a = self.attention(&self.layer_norm(x, &format!("blk{blk}.ln1"), track)?, blk, track)?;
        let x = (x + a)?;
        let h = self.layer_norm(&x, &format!("blk{blk}.ln2"), track)?;
        let h = self.linear(&h, &format!("blk{blk}.mlp1"), track)?.apply(&gelu)?;
        let h = self.linear(&h, &format!("blk{blk}.mlp2"), track)?;
        Ok((x + h)?)
    }

    fn audio_tensor(&self, batch: &[DenoiseItem<'_>]) -> Result<Tensor> {
        let l = self.config.window;
        let mut flat = Vec::with_capacity(batch.len() * l);
        for item in batch {
            if item.audio.len() != l {
                return Err(Error::InvalidArgument(format!(
                    "audio segment has {} samples, window needs {l}",
                    item.audio.len()
                )));
            }
            flat.extend_from_slice(item.audio);
        }
        let n = self.config.latent_frames();
        self.host(flat, &[batch.len(), n, self.config.ratio])
    }

    /// Per-latent-frame audio features `[n, audio_dim]` for one window.
    pub fn audio_features(&self, samples: &[f32]) -> Result<Array2<f32>> {
        if samples.len() != self.config.window {
            return Err(Error::InvalidArgument(format!(
                "audio segment has {} samples, window needs {}",
                samples.len(),
                self.config.window
            )));
        }
        let n = self.config.latent_frames();
        let a = self.host(samples.to_vec(), &[n, self.config.ratio])?;
        let f = self.audio_mlp(&a, false)?;
        let values = f.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Array2::from_shape_vec((n, self.config.audio_dim), values).map_err(|e| invalid(e.to_string()))
    }

    fn audio_mlp(&self, a: &Tensor, track: bool) -> Result<Tensor> {
        let h = self.linear(a, "audio.l1", track)?.apply(&gelu)?;
        self.linear(&h, "audio.l2", track)
    }

    fn time_mlp(&self, feats: &Tensor, track: bool) -> Result<Tensor> {
        let h = self.linear(feats, "time.l1", track)?.apply(&gelu)?;
        self.linear(&h, "time.l2", track)
    }

    fn check_batch(&self, batch: &[DenoiseItem<'_>]) -> Result<(usize, usize)> {
        let first = batch.first().ok_or_else(|| invalid("empty batch"))?;
        let (n_tok, win) = (first.seq.len(), first.seq.window_tokens);
        let expect_win = self.config.latent_frames() * self.config.tokens_per_frame();
        for item in batch {
            let s = item.seq;
            if s.len() != n_tok || s.window_tokens != win {
                return Err(invalid("all sequences in a batch must share their layout"));
            }
            if s.tokens.ncols() != self.config.patch_dim() || s.tokens_per_frame() != self.config.tokens_per_frame() {
                return Err(invalid(format!(
                    "token geometry {}x{} does not match the model ({} per frame, dim {})",
                    s.tokens_per_frame(),
                    s.tokens.ncols(),
                    self.config.tokens_per_frame(),
                    self.config.patch_dim()
                )));
            }
            if !(0.0..=1.0).contains(&item.tau) {
                return Err(invalid(format!("diffusion time {} outside [0, 1]", item.tau)));
            }
        }
        if win != expect_win {
            return Err(invalid(format!("window has {win} tokens, model expects {expect_win}")));
        }
        Ok((n_tok, win))
    }

    /// Velocity prediction `[B, window_tokens, patch_dim]`.
    ///
    /// The network estimates the clean patch `z` and the velocity is
    /// `(x - z) / max(tau, TAU_MIN)`. Patches are far wider than the token
    /// width, so a direct velocity head would have to squeeze the noise
    /// through the bottleneck.
    ///
    /// With `track` the graph reaches the parameters and can be
    /// differentiated; without it parameters enter as detached constants.
    pub fn forward(&self, batch: &[DenoiseItem<'_>], track: bool) -> Result<Tensor> {
        let (n_tok, win) = self.check_batch(batch)?;
        let b = batch.len();
        let w = self.config.token_dim;
        let pd = self.config.patch_dim();
        let tpf = self.config.tokens_per_frame();
        let n = self.config.latent_frames();

        let mut tokens = Vec::with_capacity(b * n_tok * pd);
        let mut pos = Vec::with_capacity(b * n_tok * w);
        let mut mask = Vec::with_capacity(b * n_tok);
        let mut appended = Vec::with_capacity(b * n_tok);
        let mut taus = Vec::with_capacity(b * self.config.time_dim);
        for item in batch {
            tokens.extend(item.seq.tokens.iter().copied());
            pos.extend(self.pe.embed_positions(item.seq, None).iter().copied());
            mask.extend(item.seq.condition_mask.iter().map(|&m| if m { 1.0f32 } else { 0.0 }));
            appended.extend((0..n_tok).map(|k| if item.seq.is_appended(k) { 1.0f32 } else { 0.0 }));
            taus.extend(time_features(item.tau, self.config.time_dim));
        }
        let x = self.host(tokens, &[b, n_tok, pd])?;
        let m = self.host(mask, &[b, n_tok, 1])?;
        let keep = m.affine(-1.0, 1.0)?;

        let h_noisy = self.linear(&x, "in", track)?;
        let h_clean = self.linear(&x, "phi", track)?;
        let mut h = (h_noisy.broadcast_mul(&keep)? + h_clean.broadcast_mul(&m)?)?;

        h = (h + self.host(pos, &[b, n_tok, w])?)?;
        if self.config.pe_mode == PeMode::LearnableTime {
            let spatial = self.pe.dims.0 + self.pe.dims.1;
            let learned = self.p("pe.time", track);
            let padded = Tensor::cat(&[&Tensor::zeros(spatial, self.dtype, &self.device)?, &learned], 0)?;
            let app = self.host(appended, &[b, n_tok, 1])?;
            h = h.broadcast_add(&app.broadcast_mul(&padded)?)?;
        }

        let t_noisy = self.time_mlp(&self.host(taus, &[b, self.config.time_dim])?, track)?;
        let t_clean = self.time_mlp(&self.host(time_features(0.0, self.config.time_dim), &[1, self.config.time_dim])?, track)?;
        let t_noisy = t_noisy.unsqueeze(1)?.broadcast_as((b, n_tok, w))?;
        let t_clean = t_clean.unsqueeze(1)?;
        h = (h + t_noisy.broadcast_mul(&keep)?)?;
        h = h.broadcast_add(&t_clean.broadcast_mul(&m)?)?;

        let feats = self.audio_mlp(&self.audio_tensor(batch)?, track)?;
        let a = self.linear(&feats, "audio.out", track)?;
        let a = a.unsqueeze(2)?.broadcast_as((b, n, tpf, w))?.contiguous()?.reshape((b, n * tpf, w))?;
        let a = if n_tok > win {
            Tensor::cat(&[&a, &Tensor::zeros((b, n_tok - win, w), self.dtype, &self.device)?], 1)?
        } else {
            a
        };
        h = (h + a)?;

        for blk in 0..self.config.blocks {
            h = self.block(&h, blk, track)?;
        }
        let h = self.layer_norm(&h, "final.ln", track)?;
        let z = self.linear(&h, "out", track)?.narrow(1, 0, win)?;
        let inv: Vec<f32> = batch.iter().map(|item| 1.0 / item.tau.max(TAU_MIN)).collect();
        let inv = self.host(inv, &[b, 1, 1])?;
        Ok((x.narrow(1, 0, win)? - z)?.broadcast_mul(&inv)?)
    }

    /// Host-side velocity predictions, one `[window_tokens, patch_dim]`
    /// array per item.
    pub fn predict(&self, batch: &[DenoiseItem<'_>]) -> Result<Vec<Array2<f32>>> {
        let out = self.forward(batch, false)?.to_dtype(DType::F32)?;
        let (b, win, pd) = out.dims3()?;
        let flat = out.flatten_all()?.to_vec1::<f32>()?;
        (0..b)
            .map(|i| {
                Array2::from_shape_vec((win, pd), flat[i * win * pd..(i + 1) * win * pd].to_vec())
                    .map_err(|e| invalid(e.to_string()))
            })
            .collect()
    }

    /// Weighted mean squared error `sum w (pred - v)^2 / (P sum w)`.
    pub fn weighted_mse(&self, batch: &[DenoiseItem<'_>], targets: &[Array2<f32>], weights: &[Vec<f32>]) -> Result<Tensor> {
        let pred = self.forward(batch, true)?;
        let (b, win, pd) = pred.dims3()?;
        if targets.len() != b || weights.len() != b {
            return Err(invalid("targets and weights must match the batch"));
        }
        let mut tflat = Vec::with_capacity(b * win * pd);
        let mut wflat = Vec::with_capacity(b * win);
        for (t, w) in targets.iter().zip(weights) {
            if t.dim() != (win, pd) || w.len() != win {
                return Err(invalid("target shape does not match the window"));
            }
            tflat.extend(t.iter().copied());
            wflat.extend_from_slice(w);
        }
        let total: f64 = wflat.iter().map(|&w| w as f64).sum();
        if total <= 0.0 {
            return Err(invalid("no window token carries loss weight"));
        }
        let target = self.host(tflat, &[b, win, pd])?;
        let weight = self.host(wflat, &[b, win, 1])?;
        let sq = (pred - target)?.sqr()?.broadcast_mul(&weight)?;
        Ok(sq.sum_all()?.affine(1.0 / (total * pd as f64), 0.0)?)
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            meta: meta.clone(),
        })?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, var) in &self.params {
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            let dims = var.dims();
            f.write_all(&(dims.len() as u32).to_le_bytes())?;
            for &d in dims {
                f.write_all(&(d as u64).to_le_bytes())?;
            }
            let data = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for v in data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut f = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 7];
        f.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = read_u32(&mut f).map_err(|_| bad("truncated version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let header_len = read_u64(&mut f).map_err(|_| bad("truncated header"))? as usize;
        if header_len > 1 << 24 {
            return Err(bad("implausible header length"));
        }
        let mut header = vec![0u8; header_len];
        f.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&header).map_err(|e| bad(&format!("header: {e}")))?;
        let model = Denoiser::new(header.config.clone(), 0)?;
        let count = read_u32(&mut f).map_err(|_| bad("truncated parameter count"))? as usize;
        if count != model.params.len() {
            return Err(bad(&format!("expected {} parameters, found {count}", model.params.len())));
        }
        for _ in 0..count {
            let name_len = read_u32(&mut f).map_err(|_| bad("truncated parameter name"))? as usize;
            if name_len > 256 {
                return Err(bad("implausible parameter name length"));
            }
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name).map_err(|_| bad("truncated parameter name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
            let var = model.params.get(&name).ok_or_else(|| bad(&format!("unknown parameter {name}")))?;
            let ndims = read_u32(&mut f).map_err(|_| bad("truncated dims"))? as usize;
            let mut dims = Vec::with_capacity(ndims);
            for _ in 0..ndims.min(8) {
                dims.push(read_u64(&mut f).map_err(|_| bad("truncated dims"))? as usize);
            }
            if dims != var.dims() {
                return Err(bad(&format!("{name}: dims {dims:?} differ from {:?}", var.dims())));
            }
            let count: usize = dims.iter().product();
            let mut raw = vec![0u8; count * 4];
            f.read_exact(&mut raw).map_err(|_| bad(&format!("{name}: truncated data")))?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            var.set(&Tensor::from_vec(data, dims, &model.device)?)?;
        }
        let mut rest = Vec::new();
        f.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after parameters"));
        }
        Ok((model, header.meta))
    }
}

/// Tanh-approximated GELU built from primitive ops, so its gradient is
/// exact to working precision.
fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = (x + x.powf(3.0)?.affine(0.044715, 0.0)?)?.affine(c, 0.0)?;
    x.affine(0.5, 0.0)?.mul(&inner.tanh()?.affine(1.0, 1.0)?)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub trained_steps: usize,
    pub anchor_mode: Option<AnchorMode>,
    #[serde(default)]
    pub info: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    meta: CheckpointMeta,
}

/// How training examples draw their anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSampling {
    /// Always at `n - 1 + d`.
    Fixed,
    /// Uniform over `0..=n - 1 + d_max`.
    Flexible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSampler {
    pub mode: AnchorMode,
    pub sampling: AnchorSampling,
    /// Fixed-sampling latent distance `d`.
    pub distance: i64,
    pub d_max: usize,
    /// Past-mode anchor offset in latent frames.
    pub past_latents: usize,
    pub starting_prob: f64,
}

impl AnchorSampler {
    /// Latent frames a clip must provide for one example.
    pub fn required_latents(&self, n: usize) -> usize {
        let ahead = match self.mode {
            AnchorMode::Lookahead | AnchorMode::SelfKeyframe => match self.sampling {
                AnchorSampling::Flexible => self.d_max,
                AnchorSampling::Fixed => self.distance.max(0) as usize,
            },
            _ => 0,
        };
        let behind = if self.mode == AnchorMode::Past { self.past_latents } else { 0 };
        n + ahead + behind
    }
}

/// One clean training clip and its audio, full length.
#[derive(Clone, Copy, Debug)]
pub struct ClipSample<'a> {
    pub latents: &'a LatentSequence,
    pub audio: &'a [f32],
}

/// A clean example: window tokens in model space, replaced latents and the
/// anchor marked as conditioning.
#[derive(Clone, Debug)]
pub struct LossExample {
    pub seq: TokenSequence,
    pub audio: Vec<f32>,
    pub d_effective: Option<i64>,
}

/// Draws the window offset, anchor position and starting-frame replacement
/// for one clip.
pub fn build_example<R: Rng + ?Sized>(config: &ModelConfig, clip: ClipSample<'_>, sampler: &AnchorSampler, rng: &mut R) -> Result<LossExample> {
    let n = config.latent_frames();
    let r = config.ratio;
    let need = sampler.required_latents(n);
    if clip.latents.len() < need {
        return Err(Error::InvalidArgument(format!(
            "clip has {} latents, {} mode needs {need}",
            clip.latents.len(),
            sampler.mode.name()
        )));
    }
    if clip.audio.len() < clip.latents.len() * r {
        return Err(Error::InvalidArgument("clip audio shorter than its latents".into()));
    }
    let lo = if sampler.mode == AnchorMode::Past { sampler.past_latents } else { 0 };
    let hi = clip.latents.len() - (need - lo);
    let w0 = rng.gen_range(lo..=hi);
    let window = clip.latents.range(w0, w0 + n);
    let mut d_effective = None;
    let mut seq = match sampler.mode {
        AnchorMode::None => assemble_sequence(&window, &Anchor::None, config.patch)?,
        AnchorMode::Lookahead | AnchorMode::SelfKeyframe => {
            let l = match sampler.sampling {
                AnchorSampling::Flexible => crate::anchoring::sample_anchor_position(n, sampler.d_max, rng)?,
                AnchorSampling::Fixed => n as i64 - 1 + sampler.distance,
            };
            d_effective = Some(l - (n as i64 - 1));
            let latent = clip.latents.frame(w0 + l as usize);
            assemble_sequence(&window, &Anchor::At { latent, t: l }, config.patch)?
        }
        AnchorMode::Past => {
            let p = sampler.past_latents;
            let latent = clip.latents.frame(w0 - p);
            assemble_sequence(&window, &Anchor::At { latent, t: -(p as i64) }, config.patch)?
        }
        AnchorMode::Boundary => {
            let (first, last) = (window.frame(0), window.frame(n - 1));
            assemble_sequence(&window, &Anchor::Boundary { first: Some(first), last }, config.patch)?
        }
    };
    if rng.gen_bool(sampler.starting_prob) {
        for k in 0..config.starting_latents {
            seq.mark_replaced(k);
        }
    }
    seq.tokens.mapv_inplace(to_model_space);
    let audio = clip.audio[w0 * r..(w0 + n) * r].to_vec();
    Ok(LossExample { seq, audio, d_effective })
}

/// Rectified-flow loss: `x_tau = (1 - tau) z + tau eps`, target `eps - z`,
/// averaged over window tokens that are not replaced by clean latents.
///
/// Each token is weighted by `max(tau, TAU_MIN)^2`, which turns the velocity
/// error into the error of the implied clean-patch estimate. Unweighted, the
/// `1/tau^2` factor lets near-clean samples dominate and the model never
/// learns to read its conditioning at high noise.
pub fn flow_loss<R: Rng + ?Sized>(model: &Denoiser, examples: &[LossExample], rng: &mut R) -> Result<Tensor> {
    let mut noisy = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len());
    let mut weights = Vec::with_capacity(examples.len());
    let mut taus = Vec::with_capacity(examples.len());
    for ex in examples {
        let tau: f32 = rng.gen_range(0.0..1.0);
        let win = ex.seq.window_tokens;
        let pd = ex.seq.tokens.ncols();
        let mut seq = ex.seq.clone();
        let mut target = Array2::<f32>::zeros((win, pd));
        let mut weight = vec![0.0f32; win];
        for k in 0..win {
            if ex.seq.condition_mask[k] {
                continue;
            }
            weight[k] = tau.max(TAU_MIN).powi(2);
            for c in 0..pd {
                let z = ex.seq.tokens[[k, c]];
                let eps: f32 = StandardNormal.sample(rng);
                seq.tokens[[k, c]] = (1.0 - tau) * z + tau * eps;
                target[[k, c]] = eps - z;
            }
        }
        noisy.push(seq);
        targets.push(target);
        weights.push(weight);
        taus.push(tau);
    }
    let batch: Vec<DenoiseItem<'_>> = noisy
        .iter()
        .zip(examples)
        .zip(&taus)
        .map(|((seq, ex), &tau)| DenoiseItem { seq, audio: &ex.audio, tau })
        .collect();
    model.weighted_mse(&batch, &targets, &weights)
}

/// Draws examples for a batch of clips and evaluates the flow loss.
pub fn loss<R: Rng + ?Sized>(model: &Denoiser, batch: &[ClipSample<'_>], sampler: &AnchorSampler, rng: &mut R) -> Result<Tensor> {
    let examples = batch
        .iter()
        .map(|clip| build_example(model.config(), *clip, sampler, rng))
        .collect::<Result<Vec<_>>>()?;
    flow_loss(model, &examples, rng)
}

//! Latent frames, patch tokens and factorized positional embeddings.
//!
//! Latents are lossless: `r` consecutive frames are stacked channel-wise into
//! one latent frame (`c = 3r`). Tokens are non-overlapping `p x p` patches of
//! a latent frame, each tagged with its `(x, y, t)` grid position.

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::synthworld::VideoClip;
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    /// `[n, h, w, 3r]`
    pub latents: Array4<f32>,
    pub ratio: usize,
    /// Pixel-frame index of latent 0.
    pub origin_frame: i64,
    /// Number of real frames encoded; the last group may have been padded.
    pub source_frames: usize,
    pub padded: bool,
    pub frame_rate: u32,
}

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.latents.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.latents.shape()[3]
    }

    pub fn frame(&self, k: usize) -> ArrayView3<'_, f32> {
        self.latents.index_axis(Axis(0), k)
    }

    /// Latents `[start, end)` as a new sequence (unpadded).
    pub fn range(&self, start: usize, end: usize) -> LatentSequence {
        LatentSequence {
            latents: self.latents.slice(s![start..end, .., .., ..]).to_owned(),
            ratio: self.ratio,
            origin_frame: self.origin_frame + (start * self.ratio) as i64,
            source_frames: (end - start) * self.ratio,
            padded: false,
            frame_rate: self.frame_rate,
        }
    }
}

pub fn encode(clip: &VideoClip, r: usize) -> Result<LatentSequence> {
    if r == 0 {
        return Err(invalid("compression ratio must be >= 1"));
    }
    let t = clip.len();
    let n = t.div_ceil(r);
    let (h, w) = (clip.height(), clip.width());
    let mut latents = Array4::<f32>::zeros((n, h, w, 3 * r));
    for k in 0..n {
        for g in 0..r {
            let src = (k * r + g).min(t - 1);
            latents
                .slice_mut(s![k, .., .., 3 * g..3 * g + 3])
                .assign(&clip.frames.index_axis(Axis(0), src));
        }
    }
    Ok(LatentSequence {
        latents,
        ratio: r,
        origin_frame: 0,
        source_frames: t,
        padded: t % r != 0,
        frame_rate: clip.frame_rate,
    })
}

/// Unstack latent frames back into pixel frames, dropping group padding.
pub fn decode(seq: &LatentSequence) -> VideoClip {
    let r = seq.ratio;
    let n = seq.len();
    let (h, w) = (seq.latents.shape()[1], seq.latents.shape()[2]);
    let t = seq.source_frames.min(n * r);
    let mut frames = Array4::<f32>::zeros((t, h, w, 3));
    for f in 0..t {
        let (k, g) = (f / r, f % r);
        frames
            .index_axis_mut(Axis(0), f)
            .assign(&seq.latents.slice(s![k, .., .., 3 * g..3 * g + 3]));
    }
    VideoClip {
        frames,
        frame_rate: seq.frame_rate,
    }
}

/// A single image as a latent frame: the image repeated `r` times.
pub fn frame_to_latent(frame: ArrayView3<'_, f32>, r: usize) -> Array3<f32> {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let mut out = Array3::<f32>::zeros((h, w, 3 * r));
    for g in 0..r {
        out.slice_mut(s![.., .., 3 * g..3 * g + 3]).assign(&frame);
    }
    out
}

/// Lookahead distance in latent frames, `floor(D / r)`.
pub fn latent_distance(lookahead_frames: i64, r: usize) -> Result<i64> {
    if lookahead_frames < 0 {
        return Err(invalid(format!("lookahead distance {lookahead_frames} is negative")));
    }
    if r == 0 {
        return Err(invalid("compression ratio must be >= 1"));
    }
    Ok(lookahead_frames / r as i64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Position {
    pub x: i64,
    pub y: i64,
    pub t: i64,
}

/// Flattened patch tokens. Window frames come first in temporal order, then
/// any appended condition frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `[num_tokens, p * p * c]`
    pub tokens: Array2<f32>,
    pub positions: Vec<Position>,
    /// True for clean conditioning tokens (appended anchors and replaced
    /// window latents).
    pub condition_mask: Vec<bool>,
    /// Tokens belonging to the generation window; the rest are appended.
    pub window_tokens: usize,
    pub patch: usize,
    pub channels: usize,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn window_frames(&self) -> usize {
        self.window_tokens / self.tokens_per_frame()
    }

    pub fn appended_frames(&self) -> usize {
        (self.len() - self.window_tokens) / self.tokens_per_frame()
    }

    pub fn is_appended(&self, k: usize) -> bool {
        k >= self.window_tokens
    }

    /// Marks every token of window latent `k` as clean conditioning.
    pub fn mark_replaced(&mut self, k: usize) {
        let tpf = self.tokens_per_frame();
        for m in &mut self.condition_mask[k * tpf..(k + 1) * tpf] {
            *m = true;
        }
    }

    /// Overwrites window latent `k` with `latent` and marks it as clean.
    pub fn replace_frame(&mut self, k: usize, latent: ArrayView3<'_, f32>) -> Result<()> {
        let (tokens, _) = patchify_frame(latent, self.patch, 0)?;
        let tpf = self.tokens_per_frame();
        if tokens.nrows() != tpf || tokens.ncols() != self.tokens.ncols() {
            return Err(invalid("replacement latent does not match the window geometry"));
        }
        self.tokens.slice_mut(s![k * tpf..(k + 1) * tpf, ..]).assign(&tokens);
        self.mark_replaced(k);
        Ok(())
    }

    /// The window part alone, with appended condition frames removed.
    pub fn strip_appended(&self) -> TokenSequence {
        let w = self.window_tokens;
        TokenSequence {
            tokens: self.tokens.slice(s![..w, ..]).to_owned(),
            positions: self.positions[..w].to_vec(),
            condition_mask: self.condition_mask[..w].to_vec(),
            window_tokens: w,
            patch: self.patch,
            channels: self.channels,
            grid: self.grid,
        }
    }

    /// Appends one clean latent frame at temporal index `t`.
    pub fn append_frame(&mut self, latent: ArrayView3<'_, f32>, t: i64) -> Result<()> {
        let (tokens, positions) = patchify_frame(latent, self.patch, t)?;
        if tokens.ncols() != self.tokens.ncols() || positions.len() != self.tokens_per_frame() {
            return Err(invalid(format!(
                "appended latent {:?} is not spatially compatible with the window",
                latent.shape()
            )));
        }
        self.tokens = ndarray::concatenate(Axis(0), &[self.tokens.view(), tokens.view()])
            .map_err(|e| invalid(e.to_string()))?;
        self.condition_mask.extend(std::iter::repeat_n(true, positions.len()));
        self.positions.extend(positions);
        Ok(())
    }
}

/// Patch tokens of one latent frame `[h, w, c]`, all at temporal index `t`.
pub fn patchify_frame(latent: ArrayView3<'_, f32>, patch: usize, t: i64) -> Result<(Array2<f32>, Vec<Position>)> {
    let (h, w, c) = (latent.shape()[0], latent.shape()[1], latent.shape()[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(invalid(format!("latent {h}x{w} is not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let mut tokens = Array2::<f32>::zeros((gh * gw, dim));
    let mut positions = Vec::with_capacity(gh * gw);
    for py in 0..gh {
        for px in 0..gw {
            let row = py * gw + px;
            let block = latent.slice(s![py * patch..(py + 1) * patch, px * patch..(px + 1) * patch, ..]);
            for (dst, src) in tokens.row_mut(row).iter_mut().zip(block.iter()) {
                *dst = *src;
            }
            positions.push(Position {
                x: px as i64,
                y: py as i64,
                t,
            });
        }
    }
    Ok((tokens, positions))
}

/// Tokens for every latent of `latents`, with temporal indices starting at `t0`.
pub fn patchify(latents: &LatentSequence, patch: usize, t0: i64) -> Result<TokenSequence> {
    let (h, w, c) = (latents.latents.shape()[1], latents.latents.shape()[2], latents.channels());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(invalid(format!("latent {h}x{w} is not divisible by patch {patch}")));
    }
    let mut rows = Vec::with_capacity(latents.len());
    let mut positions = Vec::new();
    for k in 0..latents.len() {
        let (tok, pos) = patchify_frame(latents.frame(k), patch, t0 + k as i64)?;
        rows.push(tok);
        positions.extend(pos);
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let tokens = ndarray::concatenate(Axis(0), &views).map_err(|e| invalid(e.to_string()))?;
    let n = positions.len();
    Ok(TokenSequence {
        tokens,
        condition_mask: vec![false; n],
        positions,
        window_tokens: n,
        patch,
        channels: c,
        grid: (h / patch, w / patch),
    })
}

/// Inverse of [`patchify`] over all frames of the sequence (window and appended).
pub fn unpatchify(seq: &TokenSequence) -> Result<Array4<f32>> {
    let tpf = seq.tokens_per_frame();
    if tpf == 0 || seq.len() % tpf != 0 {
        return Err(invalid("token count is not a whole number of frames"));
    }
    let (gh, gw) = seq.grid;
    let p = seq.patch;
    let c = seq.channels;
    if seq.tokens.ncols() != p * p * c {
        return Err(invalid("token width does not match patch geometry"));
    }
    let frames = seq.len() / tpf;
    let mut out = Array4::<f32>::zeros((frames, gh * p, gw * p, c));
    for k in 0..frames {
        for py in 0..gh {
            for px in 0..gw {
                let row = seq.tokens.row(k * tpf + py * gw + px);
                let mut block = out.slice_mut(s![k, py * p..(py + 1) * p, px * p..(px + 1) * p, ..]);
                for (dst, src) in block.iter_mut().zip(row.iter()) {
                    *dst = *src;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    /// Anchors carry the sinusoidal embedding of their (distant) index.
    SinusoidalDistant,
    /// Anchors carry a zero temporal embedding.
    ZeroTime,
    /// Anchors carry a single learned temporal embedding.
    LearnableTime,
}

/// Factorized positional embedding `p_x ++ p_y ++ p_t`.
///
/// Window tokens always use sinusoidal embeddings on all three axes. The mode
/// only changes the temporal slice of appended anchor tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEmbeddingTable {
    pub mode: PeMode,
    pub dims: (usize, usize, usize),
}

/// `[sin(pos * w_i), cos(pos * w_i)]` with `w_i = 10000^(-2i/dim)`.
pub fn sinusoid(pos: i64, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        let arg = pos as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}

impl PositionalEmbeddingTable {
    pub fn new(mode: PeMode, dims: (usize, usize, usize)) -> Result<Self> {
        if dims.0 % 2 != 0 || dims.1 % 2 != 0 || dims.2 % 2 != 0 {
            return Err(invalid(format!("embedding slices {dims:?} must be even")));
        }
        Ok(Self { mode, dims })
    }

    /// Even three-way split of `width`, temporal slice taking the remainder.
    pub fn for_width(mode: PeMode, width: usize) -> Result<Self> {
        let spatial = 2 * (width / 6);
        Self::new(mode, (spatial, spatial, width - 2 * spatial))
    }

    pub fn width(&self) -> usize {
        self.dims.0 + self.dims.1 + self.dims.2
    }

    pub fn embed(&self, pos: Position, anchor: bool, learned_time: Option<&[f32]>) -> Vec<f32> {
        let mut out = sinusoid(pos.x, self.dims.0);
        out.extend(sinusoid(pos.y, self.dims.1));
        let temporal = match (anchor, self.mode) {
            (false, _) | (true, PeMode::SinusoidalDistant) => sinusoid(pos.t, self.dims.2),
            (true, PeMode::ZeroTime) => vec![0.0; self.dims.2],
            (true, PeMode::LearnableTime) => match learned_time {
                Some(v) => v.to_vec(),
                None => vec![0.0; self.dims.2],
            },
        };
        out.extend(temporal);
        out
    }

    /// `[num_tokens, width]` embeddings for a sequence. Learnable anchor
    /// slices are filled from `learned_time` when given, else left at zero
    /// for the model to add.
    pub fn embed_positions(&self, seq: &TokenSequence, learned_time: Option<&[f32]>) -> Array2<f32> {
        let width = self.width();
        let mut out = Array2::<f32>::zeros((seq.len(), width));
        for (k, pos) in seq.positions.iter().enumerate() {
            let e = self.embed(*pos, seq.is_appended(k), learned_time);
            out.row_mut(k).assign(&ndarray::ArrayView1::from(&e[..]));
        }
        out
    }
}

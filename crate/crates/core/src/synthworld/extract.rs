//! Oracle extractors: hue, position, shape, mouth aperture and keypoints
//! recovered from pixels alone.
//!
//! Every extractor is total. Frames with no detectable sprite fall back to
//! full-frame statistics and set `flagged`.

use ndarray::ArrayView3;

use super::render::{shape_coverage, MOUTH_DROP, MOUTH_MAX_HEIGHT, MOUTH_WIDTH};
use super::Shape;

pub const KEYPOINT_COUNT: usize = 3;

const CORE_THRESHOLD: f32 = 0.5;
const FALLBACK_SIZE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEstimate {
    pub hue: f64,
    pub shape: Shape,
    /// Bounding-box height as a fraction of the frame height.
    pub size: f64,
    /// Sprite centre in frame units.
    pub position: (f64, f64),
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameAnalysis {
    pub identity: IdentityEstimate,
    pub aperture: f64,
    /// Sprite centre, then left and right mouth corners, in frame units.
    pub keypoints: Vec<(f64, f64)>,
}

fn pixel_hue(r: f32, g: f32, b: f32) -> Option<f64> {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    if c <= 0.0 {
        return None;
    }
    let h = if max == r {
        ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    };
    Some(h as f64 / 6.0)
}

struct Planes {
    h: usize,
    w: usize,
    coverage: Vec<f32>,
    white: Vec<f32>,
    rgb: Vec<[f32; 3]>,
}

impl Planes {
    fn new(frame: ArrayView3<'_, f32>) -> Self {
        let (h, w) = (frame.shape()[0], frame.shape()[1]);
        let mut coverage = Vec::with_capacity(h * w);
        let mut white = Vec::with_capacity(h * w);
        let mut rgb = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let p = [
                    frame[[i, j, 0]].clamp(0.0, 1.0),
                    frame[[i, j, 1]].clamp(0.0, 1.0),
                    frame[[i, j, 2]].clamp(0.0, 1.0),
                ];
                coverage.push(p[0].max(p[1]).max(p[2]));
                white.push(p[0].min(p[1]).min(p[2]));
                rgb.push(p);
            }
        }
        Self {
            h,
            w,
            coverage,
            white,
            rgb,
        }
    }

    fn weighted_hue(&self, mask: Option<&[bool]>) -> f64 {
        let (mut sx, mut sy) = (0.0, 0.0);
        for (k, p) in self.rgb.iter().enumerate() {
            if mask.is_some_and(|m| !m[k]) {
                continue;
            }
            let chroma = (self.coverage[k] - self.white[k]) as f64;
            if let Some(hue) = pixel_hue(p[0], p[1], p[2]) {
                let angle = hue * std::f64::consts::TAU;
                sx += chroma * angle.cos();
                sy += chroma * angle.sin();
            }
        }
        if sx == 0.0 && sy == 0.0 {
            return 0.0;
        }
        (sy.atan2(sx) / std::f64::consts::TAU).rem_euclid(1.0)
    }

    fn centroid(&self, mask: Option<&[bool]>) -> Option<(f64, f64, f64)> {
        let (mut a, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for i in 0..self.h {
            for j in 0..self.w {
                let k = i * self.w + j;
                if mask.is_some_and(|m| !m[k]) {
                    continue;
                }
                let c = self.coverage[k] as f64;
                a += c;
                sx += c * (j as f64 + 0.5);
                sy += c * (i as f64 + 0.5);
            }
        }
        (a > 0.0).then(|| (a, sx / a, sy / a))
    }

    /// Largest 4-connected component (by coverage mass) of the thresholded
    /// coverage, dilated by one pixel.
    fn sprite_mask(&self) -> Option<Vec<bool>> {
        let (h, w) = (self.h, self.w);
        let core: Vec<bool> = self.coverage.iter().map(|&c| c > CORE_THRESHOLD).collect();
        let mut label = vec![usize::MAX; h * w];
        let mut best: Option<(f64, usize)> = None;
        let mut next = 0usize;
        let mut stack = Vec::new();
        for start in 0..h * w {
            if !core[start] || label[start] != usize::MAX {
                continue;
            }
            let mut mass = 0.0;
            label[start] = next;
            stack.push(start);
            while let Some(k) = stack.pop() {
                mass += self.coverage[k] as f64;
                let (i, j) = (k / w, k % w);
                let mut visit = |ni: usize, nj: usize| {
                    let nk = ni * w + nj;
                    if core[nk] && label[nk] == usize::MAX {
                        label[nk] = next;
                        stack.push(nk);
                    }
                };
                if i > 0 {
                    visit(i - 1, j);
                }
                if i + 1 < h {
                    visit(i + 1, j);
                }
                if j > 0 {
                    visit(i, j - 1);
                }
                if j + 1 < w {
                    visit(i, j + 1);
                }
            }
            if best.is_none_or(|(m, _)| mass > m) {
                best = Some((mass, next));
            }
            next += 1;
        }
        let (_, keep) = best?;
        let mut mask = vec![false; h * w];
        for i in 0..h {
            for j in 0..w {
                if label[i * w + j] != keep {
                    continue;
                }
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni >= 0 && nj >= 0 && (ni as usize) < h && (nj as usize) < w {
                            mask[ni as usize * w + nj as usize] = true;
                        }
                    }
                }
            }
        }
        Some(mask)
    }
}

fn keypoints_for(cx: f64, cy: f64, s: f64, w: usize, h: usize) -> Vec<(f64, f64)> {
    let (wf, hf) = (w as f64, h as f64);
    let my = cy + MOUTH_DROP * s;
    vec![
        (cx / wf, cy / hf),
        ((cx - MOUTH_WIDTH * s / 2.0) / wf, my / hf),
        ((cx + MOUTH_WIDTH * s / 2.0) / wf, my / hf),
    ]
}

fn aperture_from(white_mass: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    (white_mass / (MOUTH_WIDTH * MOUTH_MAX_HEIGHT * s * s)).clamp(0.0, 1.0)
}

pub fn analyze_frame(frame: ArrayView3<'_, f32>) -> FrameAnalysis {
    let planes = Planes::new(frame);
    let (h, w) = (planes.h, planes.w);
    match planes.sprite_mask() {
        Some(mask) => {
            let (area, gx, gy) = planes.centroid(Some(&mask)).unwrap_or((0.0, w as f64 / 2.0, h as f64 / 2.0));
            let masked: Vec<f32> = planes
                .coverage
                .iter()
                .zip(&mask)
                .map(|(&c, &m)| if m { c } else { 0.0 })
                .collect();
            let mut best: Option<(f64, Shape, f64, f64, f64)> = None;
            for shape in Shape::ALL {
                let s = (area / shape.fill_factor()).sqrt();
                let cy = if shape == Shape::Triangle { gy - s / 6.0 } else { gy };
                let template = shape_coverage(shape, gx, cy, s, h, w, 4);
                let err: f64 = template
                    .iter()
                    .zip(&masked)
                    .map(|(&t, &c)| (t - c).abs() as f64)
                    .sum();
                if best.is_none_or(|b| err < b.0) {
                    best = Some((err, shape, s, gx, cy));
                }
            }
            let (_, shape, s, cx, cy) = best.expect("three candidate shapes");
            let white_mass: f64 = planes
                .white
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v as f64)
                .sum();
            FrameAnalysis {
                identity: IdentityEstimate {
                    hue: planes.weighted_hue(Some(&mask)),
                    shape,
                    size: s / h as f64,
                    position: (cx / w as f64, cy / h as f64),
                    flagged: false,
                },
                aperture: aperture_from(white_mass, s),
                keypoints: keypoints_for(cx, cy, s, w, h),
            }
        }
        None => {
            let (cx, cy) = planes
                .centroid(None)
                .map(|(_, x, y)| (x, y))
                .unwrap_or((w as f64 / 2.0, h as f64 / 2.0));
            let s = FALLBACK_SIZE * h as f64;
            let white_mass: f64 = planes.white.iter().map(|&v| v as f64).sum();
            FrameAnalysis {
                identity: IdentityEstimate {
                    hue: planes.weighted_hue(None),
                    shape: Shape::Circle,
                    size: FALLBACK_SIZE,
                    position: (cx / w as f64, cy / h as f64),
                    flagged: true,
                },
                aperture: aperture_from(white_mass, s),
                keypoints: keypoints_for(cx, cy, s, w, h),
            }
        }
    }
}

pub fn extract_identity(frame: ArrayView3<'_, f32>) -> IdentityEstimate {
    analyze_frame(frame).identity
}

pub fn extract_aperture(frame: ArrayView3<'_, f32>) -> f64 {
    analyze_frame(frame).aperture
}

pub fn extract_keypoints(frame: ArrayView3<'_, f32>) -> Vec<(f64, f64)> {
    analyze_frame(frame).keypoints
}

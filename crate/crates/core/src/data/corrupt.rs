//! Image corruptions applied frame by frame, with five severity levels each.
//!
//! Every primitive takes its parameter explicitly; [`corrupt`] maps a
//! `(kind, severity)` pair onto those parameters. Random corruptions draw all
//! their randomness from a seeded generator in a severity-independent order,
//! so higher severities perturb the same pixels further.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::synthetic::VideoClip;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    SpeckleNoise,
    GaussianBlur,
    DefocusBlur,
    ZoomBlur,
    Snow,
    Brightness,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::SpeckleNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::DefocusBlur,
        CorruptionKind::ZoomBlur,
        CorruptionKind::Snow,
        CorruptionKind::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ImpulseNoise => "impulse-noise",
            CorruptionKind::SpeckleNoise => "speckle-noise",
            CorruptionKind::GaussianBlur => "gaussian-blur",
            CorruptionKind::DefocusBlur => "defocus-blur",
            CorruptionKind::ZoomBlur => "zoom-blur",
            CorruptionKind::Snow => "snow",
            CorruptionKind::Brightness => "brightness",
        }
    }

    /// The primitive's parameter at `severity` (1..=5).
    pub fn parameter(self, severity: u8) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Domain(format!("severity {severity} outside 1..=5")));
        }
        let table: [f64; 5] = match self {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.10, 0.12],
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.04, 0.06, 0.10],
            CorruptionKind::SpeckleNoise => [0.15, 0.20, 0.30, 0.40, 0.50],
            CorruptionKind::GaussianBlur => [0.5, 0.75, 1.0, 1.5, 2.0],
            CorruptionKind::DefocusBlur => [1.0, 1.5, 2.0, 2.5, 3.0],
            CorruptionKind::ZoomBlur => [1.06, 1.11, 1.16, 1.21, 1.26],
            CorruptionKind::Snow => [0.2, 0.4, 0.6, 0.8, 1.0],
            CorruptionKind::Brightness => [0.05, 0.1, 0.15, 0.2, 0.25],
        };
        Ok(table[severity as usize - 1])
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

/// Corrupts every frame of `clip`. Randomness is keyed on `(seed, clip_id)`.
pub fn corrupt(clip: &VideoClip, spec: &CorruptionSpec) -> Result<VideoClip> {
    let p = spec.kind.parameter(spec.severity)?;
    let mut out = clip.clone();
    let shape = clip.frames.shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ clip.clip_id.rotate_left(32));
    let data = out.frames.data_mut();
    match spec.kind {
        CorruptionKind::GaussianNoise => gaussian_noise(data, p, &mut rng),
        CorruptionKind::ImpulseNoise => impulse_noise(data, p, &mut rng),
        CorruptionKind::SpeckleNoise => speckle_noise(data, p, &mut rng),
        CorruptionKind::Brightness => brightness(data, p),
        kind => {
            for plane in data.chunks_exact_mut(h * w) {
                match kind {
                    CorruptionKind::GaussianBlur => gaussian_blur(plane, h, w, p),
                    CorruptionKind::DefocusBlur => defocus_blur(plane, h, w, p),
                    CorruptionKind::ZoomBlur => zoom_blur(plane, h, w, p),
                    CorruptionKind::Snow => snow(plane, h, w, p, &mut rng),
                    _ => unreachable!("pointwise kinds handled above"),
                }
            }
        }
    }
    Ok(out)
}

fn clamp01(x: f32) -> f32 {
    x.clamp(0.0, 1.0)
}

/// `x + σ·z`, clipped.
pub fn gaussian_noise(data: &mut [f32], sigma: f64, rng: &mut impl Rng) {
    for v in data {
        let z: f64 = StandardNormal.sample(rng);
        *v = clamp01(*v + (sigma * z) as f32);
    }
}

/// Each pixel is replaced with probability `p` by 0 or 1 (equally likely).
pub fn impulse_noise(data: &mut [f32], p: f64, rng: &mut impl Rng) {
    for v in data {
        let (u, salt): (f64, bool) = (rng.gen(), rng.gen());
        if u < p {
            *v = if salt { 1.0 } else { 0.0 };
        }
    }
}

/// Multiplicative noise `x + x·σ·z`, clipped.
pub fn speckle_noise(data: &mut [f32], sigma: f64, rng: &mut impl Rng) {
    for v in data {
        let z: f64 = StandardNormal.sample(rng);
        *v = clamp01(*v + *v * (sigma * z) as f32);
    }
}

/// Additive brightness lift, clipped.
pub fn brightness(data: &mut [f32], b: f64) {
    for v in data {
        *v = clamp01(*v + b as f32);
    }
}

/// Convolution with a normalized kernel, clamping coordinates at the border.
fn filter(plane: &mut [f32], h: usize, w: usize, taps: &[(i64, i64, f32)]) {
    let src = plane.to_vec();
    let at = |y: i64, x: i64| src[y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize];
    for y in 0..h {
        for x in 0..w {
            let s: f32 = taps.iter().map(|&(dy, dx, k)| k * at(y as i64 + dy, x as i64 + dx)).sum();
            plane[y * w + x] = clamp01(s);
        }
    }
}

fn normalized(mut taps: Vec<(i64, i64, f32)>) -> Vec<(i64, i64, f32)> {
    let total: f32 = taps.iter().map(|t| t.2).sum();
    taps.iter_mut().for_each(|t| t.2 /= total);
    taps
}

pub fn gaussian_blur(plane: &mut [f32], h: usize, w: usize, sigma: f64) {
    let r = (3.0 * sigma).ceil() as i64;
    let g = |d: i64| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp() as f32;
    let row = normalized((-r..=r).map(|d| (0, d, g(d))).collect());
    let col = normalized((-r..=r).map(|d| (d, 0, g(d))).collect());
    filter(plane, h, w, &row);
    filter(plane, h, w, &col);
}

/// Uniform disk kernel of the given radius.
pub fn defocus_blur(plane: &mut [f32], h: usize, w: usize, radius: f64) {
    let r = radius.ceil() as i64;
    let mut taps = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= radius * radius {
                taps.push((dy, dx, 1.0));
            }
        }
    }
    filter(plane, h, w, &normalized(taps));
}

fn bilinear(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Mean of the frame and centre-zoomed copies at factors `1.02, 1.04, …, max_zoom`.
pub fn zoom_blur(plane: &mut [f32], h: usize, w: usize, max_zoom: f64) {
    let src = plane.to_vec();
    let zooms: Vec<f64> = (1..).map(|i| 1.0 + 0.02 * i as f64).take_while(|&z| z <= max_zoom + 1e-9).collect();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let n = (zooms.len() + 1) as f32;
    for y in 0..h {
        for x in 0..w {
            let mut acc = src[y * w + x];
            for &z in &zooms {
                acc += bilinear(&src, h, w, cy + (y as f64 - cy) / z, cx + (x as f64 - cx) / z);
            }
            plane[y * w + x] = clamp01(acc / n);
        }
    }
}

const SNOW_MAX_FLAKES: usize = 24;

/// Diagonal bright streaks plus a haze lift. `amount` in `(0, 1]` selects a
/// prefix of a fixed flake sequence and scales the lift.
pub fn snow(plane: &mut [f32], h: usize, w: usize, amount: f64, rng: &mut impl Rng) {
    let flakes: Vec<(usize, usize, usize, f32)> = (0..SNOW_MAX_FLAKES)
        .map(|_| {
            (
                rng.gen_range(0..h),
                rng.gen_range(0..w),
                rng.gen_range(2..=5),
                rng.gen_range(0.7..=1.0),
            )
        })
        .collect();
    let lift = (0.15 * amount) as f32;
    for v in plane.iter_mut() {
        *v = clamp01(*v + lift);
    }
    let count = (SNOW_MAX_FLAKES as f64 * amount).round() as usize;
    for &(y, x, len, level) in &flakes[..count] {
        for i in 0..len {
            let (yy, xx) = (y + i, x + i);
            if yy < h && xx < w {
                let v = &mut plane[yy * w + xx];
                *v = v.max(level);
            }
        }
    }
}

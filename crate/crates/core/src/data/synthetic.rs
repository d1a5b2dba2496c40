use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Primitive motion of the sprite during one phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motion {
    Up,
    Down,
    Left,
    Right,
}

impl Motion {
    pub const ALL: [Motion; 4] = [Motion::Up, Motion::Down, Motion::Left, Motion::Right];

    /// Unit displacement `(dy, dx)` in image coordinates.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Motion::Up => (-1, 0),
            Motion::Down => (1, 0),
            Motion::Left => (0, -1),
            Motion::Right => (0, 1),
        }
    }
}

/// One video: `[T, Nc, H, W]` pixels in `[0, 1]` plus its class.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor<f32>,
    pub label: usize,
    pub clip_id: u64,
}

impl VideoClip {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frame_len(&self) -> usize {
        self.frames.shape()[1..].iter().product()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames.data()[t * n..(t + 1) * n]
    }

    /// Copy with frames reordered so output frame `t` is input frame `order[t]`.
    pub fn permuted(&self, order: &[usize]) -> Result<VideoClip> {
        if order.len() != self.num_frames() || order.iter().any(|&t| t >= self.num_frames()) {
            return Err(Error::Shape(format!("bad frame order {order:?}")));
        }
        let mut data = Vec::with_capacity(self.frames.numel());
        for &t in order {
            data.extend_from_slice(self.frame(t));
        }
        Ok(VideoClip {
            frames: Tensor::new(self.frames.shape(), data)?,
            label: self.label,
            clip_id: self.clip_id,
        })
    }
}

/// Parameters of the two-phase-motion benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Number of ordered phase pairs; must be `k²` for `k ≤ 4` motions.
    pub n_classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub sprite_size: usize,
    /// Frames `[0, split)` show phase A, `[split, T)` phase B.
    pub split_frame: usize,
    /// Pixels moved per frame.
    pub speed: usize,
    /// Standard deviation of per-pixel Gaussian background noise.
    pub noise: f64,
    /// Sprite-minus-background intensity is drawn from `[contrast_min, contrast_max]`.
    pub contrast_min: f64,
    pub contrast_max: f64,
    /// Static squares of sprite size scattered over the background.
    pub clutter: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 16,
            frames: 8,
            height: 32,
            width: 32,
            sprite_size: 5,
            split_frame: 4,
            speed: 2,
            noise: 0.12,
            contrast_min: 0.15,
            contrast_max: 0.45,
            clutter: 3,
            train_size: 4000,
            val_size: 1000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn motions(&self) -> usize {
        (1..=4).find(|k| k * k == self.n_classes).unwrap_or(0)
    }

    /// Row-major index of the ordered phase pair.
    pub fn label_of(&self, a: Motion, b: Motion) -> usize {
        let idx = |m: Motion| Motion::ALL.iter().position(|&x| x == m).expect("listed");
        idx(a) * self.motions() + idx(b)
    }

    pub fn phases_of(&self, label: usize) -> (Motion, Motion) {
        let k = self.motions();
        (Motion::ALL[label / k], Motion::ALL[label % k])
    }

    /// Cumulative sprite offsets `(dy, dx)` for every frame.
    fn offsets(&self, a: Motion, b: Motion) -> Vec<(i64, i64)> {
        let mut pos = (0i64, 0i64);
        let mut out = vec![pos];
        for t in 1..self.frames {
            let (dy, dx) = if t < self.split_frame { a.delta() } else { b.delta() };
            pos = (pos.0 + dy * self.speed as i64, pos.1 + dx * self.speed as i64);
            out.push(pos);
        }
        out
    }

    fn start_range(&self, offsets: &[(i64, i64)]) -> ((i64, i64), (i64, i64)) {
        let s = self.sprite_size as i64;
        let (miny, maxy) = offsets.iter().fold((0, 0), |(lo, hi), o| (lo.min(o.0), hi.max(o.0)));
        let (minx, maxx) = offsets.iter().fold((0, 0), |(lo, hi), o| (lo.min(o.1), hi.max(o.1)));
        (
            (-miny, self.height as i64 - s - maxy),
            (-minx, self.width as i64 - s - maxx),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.motions() == 0 {
            return Err(Error::Spec(format!(
                "n_classes {} is not a square of 1..=4 motions",
                self.n_classes
            )));
        }
        if self.frames < 2 || self.split_frame == 0 || self.split_frame >= self.frames {
            return Err(Error::Spec(format!(
                "split frame {} must lie strictly inside {} frames",
                self.split_frame, self.frames
            )));
        }
        if self.sprite_size == 0 || self.noise < 0.0 {
            return Err(Error::Spec("sprite size must be positive and noise non-negative".into()));
        }
        if !(0.0 < self.contrast_min && self.contrast_min <= self.contrast_max && self.contrast_max <= 0.8) {
            return Err(Error::Spec("contrast range must satisfy 0 < min ≤ max ≤ 0.8".into()));
        }
        for label in 0..self.n_classes {
            let (a, b) = self.phases_of(label);
            let ((y0, y1), (x0, x1)) = self.start_range(&self.offsets(a, b));
            if y0 > y1 || x0 > x1 {
                return Err(Error::Spec(format!(
                    "a {}px sprite moving {a:?} then {b:?} at {}px/frame does not fit {}×{}",
                    self.sprite_size, self.speed, self.height, self.width
                )));
            }
        }
        Ok(())
    }

    /// Renders clip `clip_id` with class `label`; deterministic in (seed, clip_id).
    pub fn render(&self, clip_id: u64, label: usize) -> Result<VideoClip> {
        if label >= self.n_classes {
            return Err(Error::Domain(format!("label {label} out of range")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ clip_id);
        let (a, b) = self.phases_of(label);
        let offsets = self.offsets(a, b);
        let ((y0, y1), (x0, x1)) = self.start_range(&offsets);
        if y0 > y1 || x0 > x1 {
            return Err(Error::Spec("sprite cannot fit its trajectory".into()));
        }
        let (sy, sx) = (rng.gen_range(y0..=y1), rng.gen_range(x0..=x1));
        let background: f32 = rng.gen_range(0.0..=0.2);
        let intensity = background + rng.gen_range(self.contrast_min..=self.contrast_max) as f32;
        let (h, w, s) = (self.height, self.width, self.sprite_size as i64);
        let clutter: Vec<(i64, i64, f32)> = (0..self.clutter)
            .map(|_| {
                let c = background + rng.gen_range(self.contrast_min..=self.contrast_max) as f32;
                (rng.gen_range(0..=h as i64 - s), rng.gen_range(0..=w as i64 - s), c)
            })
            .collect();
        let noise = Normal::new(0.0, self.noise.max(1e-12)).expect("valid std");
        let within = |y: i64, x: i64, top: i64, left: i64| y >= top && y < top + s && x >= left && x < left + s;
        let mut data = Vec::with_capacity(self.frames * h * w);
        for &(dy, dx) in &offsets {
            let (top, left) = (sy + dy, sx + dx);
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let base = if within(y, x, top, left) {
                        intensity
                    } else {
                        clutter
                            .iter()
                            .filter(|c| within(y, x, c.0, c.1))
                            .map(|c| c.2)
                            .fold(background, f32::max)
                    };
                    let n = if self.noise > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
                    data.push((base + n).clamp(0.0, 1.0));
                }
            }
        }
        Ok(VideoClip {
            frames: Tensor::new(&[self.frames, 1, h, w], data)?,
            label,
            clip_id,
        })
    }
}

/// Train and validation splits, disjoint by `clip_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub train: Vec<VideoClip>,
    pub val: Vec<VideoClip>,
}

/// Generates both splits. Train ids are `0..train_size`, val ids follow.
/// Labels cycle through the classes so every split is balanced.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let make = |range: std::ops::Range<u64>| -> Result<Vec<VideoClip>> {
        range
            .enumerate()
            .map(|(i, id)| spec.render(id, i % spec.n_classes))
            .collect()
    };
    let n_train = spec.train_size as u64;
    Ok(Dataset {
        spec: spec.clone(),
        train: make(0..n_train)?,
        val: make(n_train..n_train + spec.val_size as u64)?,
    })
}

//! Synthetic redundant video: one small moving sprite over a static textured
//! background. The class is a function of the sprite's motion alone.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use svt_tensor::DArray;

use crate::error::{config_err, HarnessError, Result};

/// Peak-to-peak contrast of the static background.
pub const TEXTURE: f64 = 0.2;

/// Largest allowed foreground share of any frame.
pub const MAX_FOREGROUND: f64 = 0.15;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Up to eight motion patterns, one per class.
    #[default]
    Motion,
    /// Class 0 holds still, class 1 translates in a random direction.
    StaticVsMoving,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    OrbitCw,
    OrbitCcw,
    Grow,
    Shrink,
    Still,
}

pub const MOTIONS: [Motion; 8] = [
    Motion::Left,
    Motion::Right,
    Motion::Up,
    Motion::Down,
    Motion::OrbitCw,
    Motion::OrbitCcw,
    Motion::Grow,
    Motion::Shrink,
];

fn default_fraction() -> f64 {
    0.1
}

fn default_noise() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticVideoSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub task: Task,
    pub num_classes: usize,
    /// Sprite area as a fraction of the frame.
    #[serde(default = "default_fraction")]
    pub sprite_fraction: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Clips per split; multiples of `num_classes`.
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl SyntheticVideoSpec {
    /// Side of the full-size square sprite in pixels.
    pub fn sprite_side(&self) -> usize {
        (self.sprite_fraction * (self.height * self.width) as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.height == 0 || self.width == 0 {
            return config_err("dataset needs at least 2 frames and a nonempty frame");
        }
        if !(self.sprite_fraction > 0.0) || !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return config_err("sprite_fraction must be positive and noise_sigma finite and nonnegative");
        }
        let s = self.sprite_side();
        if s > self.height.min(self.width) {
            return config_err(format!(
                "sprite side {s} exceeds the {}x{} frame",
                self.height, self.width
            ));
        }
        if s < 2 {
            return config_err("sprite must be at least 2 pixels wide");
        }
        if (s * s) as f64 >= MAX_FOREGROUND * (self.height * self.width) as f64 {
            return config_err(format!(
                "sprite covers {} of {} pixels, at least {MAX_FOREGROUND} of the frame",
                s * s,
                self.height * self.width
            ));
        }
        let max_classes = match self.task {
            Task::Motion => MOTIONS.len(),
            Task::StaticVsMoving => 2,
        };
        if self.num_classes < 2 || self.num_classes > max_classes {
            return config_err(format!("{:?} supports 2..={max_classes} classes", self.task));
        }
        for (name, n) in [("train_size", self.train_size), ("val_size", self.val_size)] {
            if n == 0 || n % self.num_classes != 0 {
                return config_err(format!("{name} {n} is not a positive multiple of {}", self.num_classes));
            }
        }
        Ok(())
    }

    /// Model input shape `(frames, height, width, 1)`.
    pub fn clip_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    /// `[F, H, W, 1]`.
    pub video: DArray,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticVideoSpec,
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Clip] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

pub fn generate_dataset(spec: &SyntheticVideoSpec) -> Result<Dataset> {
    spec.validate()?;
    let gen = |split: Split, n: usize| (0..n).map(|i| generate_clip(spec, split, i)).collect();
    Ok(Dataset {
        spec: spec.clone(),
        train: gen(Split::Train, spec.train_size),
        val: gen(Split::Val, spec.val_size),
    })
}

/// Sprite square per frame: `(top, left, side)` in pixels.
pub type Track = Vec<(usize, usize, usize)>;

fn motion_of(spec: &SyntheticVideoSpec, label: usize, rng: &mut ChaCha8Rng) -> Motion {
    match spec.task {
        Task::Motion => MOTIONS[label],
        Task::StaticVsMoving if label == 0 => Motion::Still,
        Task::StaticVsMoving => MOTIONS[rng.random_range(0..4)],
    }
}

/// Sprite geometry; every square lies inside the frame.
pub fn sprite_track(spec: &SyntheticVideoSpec, motion: Motion, rng: &mut ChaCha8Rng) -> Track {
    let (h, w, f) = (spec.height as f64, spec.width as f64, spec.frames);
    let s = spec.sprite_side();
    let sf = s as f64;
    let phase = |t: usize| t as f64 / (f - 1) as f64;
    // Centers as floats; converted to clamped integer corners below.
    let centers: Vec<(f64, f64, usize)> = match motion {
        Motion::Left | Motion::Right | Motion::Up | Motion::Down => {
            let horizontal = matches!(motion, Motion::Left | Motion::Right);
            let (along, across) = if horizontal { (w, h) } else { (h, w) };
            let travel = 0.9 * (along - sf);
            let start = sf / 2.0 + rng.random::<f64>() * (along - sf - travel);
            let cross = sf / 2.0 + rng.random::<f64>() * (across - sf);
            let forward = matches!(motion, Motion::Right | Motion::Down);
            (0..f)
                .map(|t| {
                    let u = if forward { phase(t) } else { 1.0 - phase(t) };
                    let a = start + travel * u;
                    if horizontal {
                        (cross, a, s)
                    } else {
                        (a, cross, s)
                    }
                })
                .collect()
        }
        Motion::OrbitCw | Motion::OrbitCcw => {
            let radius = ((h.min(w) - sf) / 2.0 - 1.0).max(1.0);
            let (cy, cx) = (h / 2.0, w / 2.0);
            let start = rng.random::<f64>() * 2.0 * PI;
            let sign = if motion == Motion::OrbitCw { 1.0 } else { -1.0 };
            (0..f)
                .map(|t| {
                    let a = start + sign * 1.5 * PI * phase(t);
                    (cy + radius * a.sin(), cx + radius * a.cos(), s)
                })
                .collect()
        }
        Motion::Grow | Motion::Shrink | Motion::Still => {
            let cy = sf / 2.0 + rng.random::<f64>() * (h - sf);
            let cx = sf / 2.0 + rng.random::<f64>() * (w - sf);
            (0..f)
                .map(|t| {
                    let u = match motion {
                        Motion::Grow => phase(t),
                        Motion::Shrink => 1.0 - phase(t),
                        _ => 1.0,
                    };
                    let side = ((sf * (0.5 + 0.5 * u)).round() as usize).max(1);
                    (cy, cx, side)
                })
                .collect()
        }
    };
    centers
        .into_iter()
        .map(|(cy, cx, side)| {
            let corner = |c: f64, extent: usize| {
                let v = (c - side as f64 / 2.0).round().max(0.0) as usize;
                v.min(extent - side)
            };
            (corner(cy, spec.height), corner(cx, spec.width), side)
        })
        .collect()
}

fn clip_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lane = match split {
        Split::Train => 0,
        Split::Val => 1u64 << 40,
    };
    rng.set_stream(lane + index as u64);
    rng
}

/// Clip `index` of `split`; its label is `index % num_classes`.
pub fn generate_clip(spec: &SyntheticVideoSpec, split: Split, index: usize) -> Clip {
    let mut rng = clip_rng(spec.seed, split, index);
    let label = index % spec.num_classes;
    let motion = motion_of(spec, label, &mut rng);
    let track = sprite_track(spec, motion, &mut rng);
    let (h, w) = (spec.height, spec.width);
    // Background varies on 2x2 pixel cells and never changes over time.
    let cells_w = w.div_ceil(2);
    let cells: Vec<f64> = (0..h.div_ceil(2) * cells_w).map(|_| rng.random::<f64>() - 0.5).collect();
    let brightness = 1.0 + 0.25 * rng.random::<f64>();
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let mut video = DArray::zeros(&spec.clip_shape());
    let data = video.data_mut();
    for (t, &(top, left, side)) in track.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let inside = (top..top + side).contains(&y) && (left..left + side).contains(&x);
                let base = if inside { brightness } else { TEXTURE * cells[(y / 2) * cells_w + x / 2] };
                data[(t * h + y) * w + x] = base + noise.sample(&mut rng);
            }
        }
    }
    debug_assert!(track.iter().all(|&(_, _, s)| ((s * s) as f64) < MAX_FOREGROUND * (h * w) as f64));
    Clip { video, label }
}

/// Mean absolute difference between consecutive frames.
pub fn temporal_difference(clip: &Clip) -> f64 {
    let s = clip.video.shape();
    let frame = s[1] * s[2] * s[3];
    let d = clip.video.data();
    let total: f64 = (frame..d.len()).map(|i| (d[i] - d[i - frame]).abs()).sum();
    total / (d.len() - frame) as f64
}

const MAGIC: &[u8; 4] = b"SVTD";

/// Binary split file: magic, count and clip shape, then label and samples
/// (little-endian `f64`) for each clip.
pub fn write_split(path: &Path, clips: &[Clip]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let shape = clips.first().map(|c| c.video.shape().to_vec()).unwrap_or(vec![0; 4]);
    for v in std::iter::once(clips.len()).chain(shape.iter().copied()) {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for c in clips {
        buf.extend_from_slice(&(c.label as u64).to_le_bytes());
        for v in c.video.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    f.write_all(&buf).map_err(|e| HarnessError::io(path, e))
}

pub fn read_split(path: &Path) -> Result<Vec<Clip>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| HarnessError::io(path, e))?;
    let bad = || HarnessError::Argument(format!("{} is not a dataset split", path.display()));
    if bytes.len() < 44 || &bytes[..4] != MAGIC {
        return Err(bad());
    }
    let mut words = bytes[4..].chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut next = || words.next().ok_or_else(bad);
    let count = next()? as usize;
    let shape: Vec<usize> = (0..4).map(|_| next().map(|v| v as usize)).collect::<Result<_>>()?;
    let numel: usize = shape.iter().product();
    let mut clips = Vec::with_capacity(count);
    for _ in 0..count {
        let label = next()? as usize;
        let data = (0..numel).map(|_| next().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        let video = DArray::new(shape.clone(), data).map_err(|_| bad())?;
        clips.push(Clip { video, label });
    }
    Ok(clips)
}

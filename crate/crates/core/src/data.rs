//! Frame datasets: the SEWF binary format and synthetic generators.
//!
//! SEWF layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SEWF"
//! 4       2     version (u16) = 1
//! 6       4     samples (u32)
//! 10      4     T (u32)
//! 14      4     C (u32)
//! 18      4     H (u32)
//! 22      4     W (u32)
//! 26      4     classes (u32)
//! 30      ...   per sample: T·C·H·W f32 frames (t, c, h, w order), then label (u32)
//! ```

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kv::{ConfigError, KvConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SEWF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 30;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LoadError {
    #[error("bad magic bytes {found:?}, expected \"SEWF\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported SEWF version {0}")]
    UnsupportedVersion(u16),
    #[error("invalid header field `{field}`: {message}")]
    InvalidHeader {
        field: &'static str,
        message: String,
    },
    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("{extra} trailing bytes after the last sample (expected {expected} bytes in total)")]
    TrailingBytes { expected: u64, extra: u64 },
    #[error("sample {sample}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        sample: usize,
        label: u32,
        classes: u32,
    },
    #[error("sample {sample}: non-finite frame value")]
    NonFinite { sample: usize },
}

/// Samples of `T×C×H×W` frames with integer labels. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDataset {
    timesteps: usize,
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    frames: Vec<f32>,
    labels: Vec<u32>,
}

impl FrameDataset {
    pub fn new(
        timesteps: usize,
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
    ) -> Self {
        Self {
            timesteps,
            channels,
            height,
            width,
            classes,
            frames: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `[C, H, W]`.
    pub fn frame_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn sample_len(&self) -> usize {
        self.timesteps * self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn push(&mut self, frames: &[f32], label: usize) {
        assert_eq!(frames.len(), self.sample_len(), "sample size");
        assert!(label < self.classes, "label {label} out of range");
        self.frames.extend_from_slice(frames);
        self.labels.push(label as u32);
    }

    pub fn sample(&self, i: usize) -> (&[f32], usize) {
        let n = self.sample_len();
        (&self.frames[i * n..(i + 1) * n], self.labels[i] as usize)
    }

    /// Time-major batch `[T, B, C, H, W]` and labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let frame = self.channels * self.height * self.width;
        let b = indices.len();
        let mut data = vec![0.0; self.timesteps * b * frame];
        let mut labels = Vec::with_capacity(b);
        for (bi, &i) in indices.iter().enumerate() {
            let (x, y) = self.sample(i);
            labels.push(y);
            for t in 0..self.timesteps {
                let dst = &mut data[(t * b + bi) * frame..][..frame];
                for (d, s) in dst.iter_mut().zip(&x[t * frame..(t + 1) * frame]) {
                    *d = f64::from(*s);
                }
            }
        }
        let shape = vec![self.timesteps, b, self.channels, self.height, self.width];
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let cut = n * self.sample_len();
        let mut head = Self::new(
            self.timesteps,
            self.channels,
            self.height,
            self.width,
            self.classes,
        );
        let mut tail = head.clone();
        head.frames = self.frames[..cut].to_vec();
        head.labels = self.labels[..n].to_vec();
        tail.frames = self.frames[cut..].to_vec();
        tail.labels = self.labels[n..].to_vec();
        (head, tail)
    }

    /// Each sample averaged over time into a single frame (`T = 1`).
    pub fn collapse_time(&self) -> Self {
        let frame = self.channels * self.height * self.width;
        let mut out = Self::new(1, self.channels, self.height, self.width, self.classes);
        for i in 0..self.len() {
            let (x, y) = self.sample(i);
            let mut avg = vec![0.0f32; frame];
            for t in 0..self.timesteps {
                for (a, v) in avg.iter_mut().zip(&x[t * frame..(t + 1) * frame]) {
                    *a += v;
                }
            }
            avg.iter_mut().for_each(|a| *a /= self.timesteps as f32);
            out.push(&avg, y);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(HEADER_LEN + self.frames.len() * 4 + self.labels.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            self.len(),
            self.timesteps,
            self.channels,
            self.height,
            self.width,
            self.classes,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let n = self.sample_len();
        for (i, &label) in self.labels.iter().enumerate() {
            for v in &self.frames[i * n..(i + 1) * n] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&label.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LoadError> {
        let actual = bytes.len() as u64;
        if bytes.len() < 4 {
            return Err(LoadError::Truncated {
                what: "header",
                expected: HEADER_LEN as u64,
                actual,
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(LoadError::BadMagic {
                found: bytes[..4].to_vec(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(LoadError::Truncated {
                what: "header",
                expected: HEADER_LEN as u64,
                actual,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(LoadError::UnsupportedVersion(version));
        }
        let field = |i: usize| {
            u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes"))
        };
        let (samples, t, c, h, w, classes) =
            (field(0), field(1), field(2), field(3), field(4), field(5));
        for (name, v) in [("T", t), ("C", c), ("H", h), ("W", w), ("classes", classes)] {
            if v == 0 {
                return Err(LoadError::InvalidHeader {
                    field: name,
                    message: "must be at least 1".into(),
                });
            }
        }
        let sample_values = u64::from(t) * u64::from(c) * u64::from(h) * u64::from(w);
        let expected = HEADER_LEN as u64 + u64::from(samples) * (sample_values * 4 + 4);
        if actual < expected {
            return Err(LoadError::Truncated {
                what: "payload",
                expected,
                actual,
            });
        }
        if actual > expected {
            return Err(LoadError::TrailingBytes {
                expected,
                extra: actual - expected,
            });
        }
        let mut ds = Self::new(
            t as usize,
            c as usize,
            h as usize,
            w as usize,
            classes as usize,
        );
        let n = sample_values as usize;
        ds.frames.reserve(n * samples as usize);
        let mut off = HEADER_LEN;
        for s in 0..samples as usize {
            for chunk in bytes[off..off + 4 * n].chunks_exact(4) {
                let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(LoadError::NonFinite { sample: s });
                }
                ds.frames.push(v);
            }
            off += 4 * n;
            let label = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
            off += 4;
            if label >= classes {
                return Err(LoadError::LabelOutOfRange {
                    sample: s,
                    label,
                    classes,
                });
            }
            ds.labels.push(label);
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Reads a SEWF file.
pub fn load_frames(path: impl AsRef<Path>) -> Result<FrameDataset> {
    let bytes = std::fs::read(path)?;
    Ok(FrameDataset::from_bytes(&bytes)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    /// Fixed frames presented in a class-specific order; time-averaged frames are identical across classes.
    TemporalPattern,
    /// A bar sweeping in a class-specific direction, as ON/OFF polarity channels.
    MovingBar,
    /// A class-specific blob, constant over time.
    StaticBlobs,
}

impl std::str::FromStr for GeneratorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "temporal-pattern" => Ok(GeneratorKind::TemporalPattern),
            "moving-bar" => Ok(GeneratorKind::MovingBar),
            "static-blobs" => Ok(GeneratorKind::StaticBlobs),
            other => Err(format!(
                "unknown generator `{other}` (expected temporal-pattern, moving-bar or static-blobs)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: GeneratorKind,
    pub samples: usize,
    pub classes: usize,
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    /// Probability of a spurious event per pixel (event generators) or amplitude of
    /// uniform additive noise (static blobs).
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(kind: GeneratorKind) -> Self {
        Self {
            kind,
            samples: 256,
            classes: 4,
            timesteps: 4,
            height: 16,
            width: 16,
            noise: 0.0,
            seed: 0,
        }
    }

    pub fn channels(&self) -> usize {
        match self.kind {
            GeneratorKind::MovingBar => 2,
            GeneratorKind::TemporalPattern | GeneratorKind::StaticBlobs => 1,
        }
    }

    pub const KEYS: [&'static str; 8] = [
        "generator",
        "samples",
        "classes",
        "T",
        "height",
        "width",
        "noise",
        "seed",
    ];

    /// Reads `generator`, `samples`, `classes`, `T`, `height`, `width`, `noise`, `seed`.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self, ConfigError> {
        let kind: GeneratorKind = cfg.require("generator")?;
        let d = Self::new(kind);
        let spec = Self {
            kind,
            samples: cfg.get_or("samples", d.samples)?,
            classes: cfg.get_or("classes", d.classes)?,
            timesteps: cfg.get_or("T", d.timesteps)?,
            height: cfg.get_or("height", d.height)?,
            width: cfg.get_or("width", d.width)?,
            noise: cfg.get_or("noise", d.noise)?,
            seed: cfg.get_or("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("classes", self.classes),
            ("T", self.timesteps),
            ("height", self.height),
            ("width", self.width),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(ConfigError::new(k, "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(ConfigError::new("noise", "must lie in [0, 1]"));
        }
        match self.kind {
            GeneratorKind::MovingBar if self.classes > 4 => Err(ConfigError::new(
                "classes",
                "moving-bar supports at most 4 directions",
            )),
            GeneratorKind::TemporalPattern => {
                let perms: usize = (1..=self.timesteps.min(20)).product();
                if self.classes > perms {
                    Err(ConfigError::new(
                        "classes",
                        format!("T = {} allows only {perms} orderings", self.timesteps),
                    ))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Generates a dataset; a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FrameDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ds = FrameDataset::new(
        spec.timesteps,
        spec.channels(),
        spec.height,
        spec.width,
        spec.classes,
    );
    match spec.kind {
        GeneratorKind::MovingBar => moving_bar(spec, &mut rng, &mut ds),
        GeneratorKind::TemporalPattern => temporal_pattern(spec, &mut rng, &mut ds),
        GeneratorKind::StaticBlobs => static_blobs(spec, &mut rng, &mut ds),
    }
    Ok(ds)
}

fn add_event_noise(frame: &mut [f32], p: f64, rng: &mut ChaCha8Rng) {
    if p > 0.0 {
        for v in frame.iter_mut() {
            if rng.gen::<f64>() < p {
                *v = 1.0;
            }
        }
    }
}

fn moving_bar(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, ds: &mut FrameDataset) {
    let (h, w, t_len) = (spec.height, spec.width, spec.timesteps);
    let plane = h * w;
    for i in 0..spec.samples {
        let label = i % spec.classes;
        // 0: right, 1: left, 2: down, 3: up
        let horizontal = label < 2;
        let dir: isize = if label.is_multiple_of(2) { 1 } else { -1 };
        let (axis_len, span_len) = if horizontal { (w, h) } else { (h, w) };
        let start = rng.gen_range(0..axis_len) as isize;
        let bar_len = rng.gen_range(span_len.div_ceil(2)..=span_len);
        let offset = rng.gen_range(0..=span_len - bar_len);
        let mut frames = vec![0.0f32; t_len * 2 * plane];
        for t in 0..t_len {
            let pos = |step: isize| (start + dir * step).rem_euclid(axis_len as isize) as usize;
            let (on, off) = (pos(t as isize), pos(t as isize - 1));
            let frame = &mut frames[t * 2 * plane..(t + 1) * 2 * plane];
            for k in offset..offset + bar_len {
                let (on_idx, off_idx) = if horizontal {
                    (k * w + on, k * w + off)
                } else {
                    (on * w + k, off * w + k)
                };
                frame[on_idx] = 1.0;
                frame[plane + off_idx] = 1.0;
            }
            add_event_noise(frame, spec.noise, rng);
        }
        ds.push(&frames, label);
    }
}

fn temporal_pattern(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, ds: &mut FrameDataset) {
    let plane = spec.height * spec.width;
    let t_len = spec.timesteps;
    let patterns: Vec<Vec<f32>> = (0..t_len)
        .map(|_| {
            (0..plane)
                .map(|_| if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut orders: Vec<Vec<usize>> = vec![(0..t_len).collect()];
    if spec.classes > 1 {
        orders.push((0..t_len).rev().collect());
    }
    while orders.len() < spec.classes {
        let mut p: Vec<usize> = (0..t_len).collect();
        p.shuffle(rng);
        if !orders.contains(&p) {
            orders.push(p);
        }
    }
    orders.truncate(spec.classes);
    for i in 0..spec.samples {
        let label = i % spec.classes;
        let mut frames = Vec::with_capacity(t_len * plane);
        for &k in &orders[label] {
            let mut f = patterns[k].clone();
            add_event_noise(&mut f, spec.noise, rng);
            frames.extend(f);
        }
        ds.push(&frames, label);
    }
}

fn static_blobs(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, ds: &mut FrameDataset) {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let size = h.min(w);
    let radius = 0.3 * size;
    let sigma = 0.15 * size;
    for i in 0..spec.samples {
        let label = i % spec.classes;
        let angle = 2.0 * PI * label as f64 / spec.classes as f64;
        let cy = (h - 1.0) / 2.0 + radius * angle.sin() + rng.gen_range(-1.0..=1.0);
        let cx = (w - 1.0) / 2.0 + radius * angle.cos() + rng.gen_range(-1.0..=1.0);
        let mut frame = Vec::with_capacity(spec.height * spec.width);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let mut v = (-d2 / (2.0 * sigma * sigma)).exp();
                if spec.noise > 0.0 {
                    v += spec.noise * rng.gen_range(-1.0..=1.0);
                }
                frame.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        let frames: Vec<f32> = (0..spec.timesteps)
            .flat_map(|_| frame.iter().copied())
            .collect();
        ds.push(&frames, label);
    }
}

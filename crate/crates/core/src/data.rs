//! Labelled u8 image datasets: the binary file format, batching and the
//! synthetic grating generator.
//!
//! File layout (little-endian): magic `MFFDATA1`, version u16, n u32,
//! H u16, W u16, C u16, n labels u16, class count u16, then n·C·H·W pixel
//! bytes with each image stored channel-major, rows within a channel.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 8] = b"MFFDATA1";
pub const DATA_VERSION: u16 = 1;
const HEADER_LEN: usize = 8 + 2 + 4 + 2 + 2 + 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub labels: Vec<u16>,
    pub pixels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        classes: usize,
        labels: Vec<u16>,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        let ds = Self {
            height,
            width,
            channels,
            classes,
            labels,
            pixels,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let fits = |v: usize| v > 0 && v <= u16::MAX as usize;
        if !fits(self.height) || !fits(self.width) || !fits(self.channels) || !fits(self.classes) {
            return Err(Error::Format("image dims and class count must lie in 1..=65535".into()));
        }
        if self.labels.len() > u32::MAX as usize {
            return Err(Error::Format("too many images".into()));
        }
        let expect = self.labels.len() * self.image_len();
        if self.pixels.len() != expect {
            return Err(Error::Length {
                expected: expect as u64,
                actual: self.pixels.len() as u64,
            });
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::Format(format!(
                "label {l} out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let k = self.image_len();
        &self.pixels[i * k..(i + 1) * k]
    }

    /// Images `[B,C,H,W]` scaled to `[0,1]`. Rows are filled in parallel on
    /// the current rayon pool; the result does not depend on thread count.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let k = self.image_len();
        let mut data = vec![0.0; indices.len() * k];
        data.par_chunks_mut(k).zip(indices.par_iter()).for_each(|(dst, &i)| {
            for (d, &p) in dst.iter_mut().zip(self.image(i)) {
                *d = p as f64 / 255.0;
            }
        });
        Tensor::new([indices.len(), self.channels, self.height, self.width], data).expect("dataset dims are positive")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            pixels,
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            channels: self.channels,
            classes: self.classes,
            labels: Vec::new(),
            pixels: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 2 * self.len() + 2 + self.pixels.len());
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&DATA_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&(self.classes as u16).to_le_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses a dataset file, validating the header before touching the
    /// payload.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Length {
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        if &bytes[..8] != DATA_MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let version = u16_at(8);
        if version != DATA_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let (h, w, c) = (u16_at(14) as usize, u16_at(16) as usize, u16_at(18) as usize);
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Format("zero image dimension".into()));
        }
        let expected = HEADER_LEN as u64 + 2 * n as u64 + 2 + (n * c * h * w) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::Length {
                expected,
                actual: bytes.len() as u64,
            });
        }
        let labels: Vec<u16> = (0..n).map(|i| u16_at(HEADER_LEN + 2 * i)).collect();
        let at = HEADER_LEN + 2 * n;
        let classes = u16_at(at) as usize;
        if classes == 0 {
            return Err(Error::Format("zero class count".into()));
        }
        Self::new(h, w, c, classes, labels, bytes[at + 2..].to_vec())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Low-frequency grating amplitude around mid-grey.
const SIGNAL_AMP: f64 = 0.25;
/// Cycles of the class grating across the image.
const SIGNAL_CYCLES: f64 = 1.0;
/// Each of the two texture gratings; 0.3 in total.
const TEXTURE_AMP: f64 = 0.15;
const TEXTURE_FREQ: (f64, f64) = (0.35, 0.45);
const NOISE_STD: f64 = 0.05;

/// Grayscale images of a class-oriented low-frequency grating under
/// class-independent near-Nyquist texture and pixel noise. Labels cycle
/// through the classes. The grating phase is drawn from half a period so
/// each class keeps a distinct mean image.
pub fn generate_synthetic(seed: u64, n: usize, classes: usize, size: usize) -> Result<Dataset> {
    if !(2..=16).contains(&classes) {
        return Err(Error::invalid(
            "generate_synthetic",
            format!("classes {classes} outside 2..=16"),
        ));
    }
    if ![16, 32, 64].contains(&size) {
        return Err(Error::invalid(
            "generate_synthetic",
            format!("size {size} not one of 16, 32, 64"),
        ));
    }
    if n == 0 || n > u32::MAX as usize {
        return Err(Error::invalid(
            "generate_synthetic",
            format!("image count {n} out of range"),
        ));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let centre = (size as f64 - 1.0) / 2.0;
    let k0 = 2.0 * PI * SIGNAL_CYCLES / size as f64;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * size * size);
    for i in 0..n {
        let class = i % classes;
        labels.push(class as u16);
        let theta = class as f64 * PI / classes as f64;
        let phase = rng.uniform_range(0.0, PI);
        let texture: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                let f = 2.0 * PI * rng.uniform_range(TEXTURE_FREQ.0, TEXTURE_FREQ.1);
                let a = rng.uniform_range(0.0, PI);
                (f * a.cos(), f * a.sin(), rng.uniform_range(0.0, 2.0 * PI), TEXTURE_AMP)
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 - centre, y as f64 - centre);
                let mut p = 0.5 + SIGNAL_AMP * (k0 * (u * theta.cos() + v * theta.sin()) + phase).cos();
                for &(kx, ky, ph, amp) in &texture {
                    p += amp * (kx * u + ky * v + ph).cos();
                }
                p += NOISE_STD * rng.normal();
                pixels.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Dataset::new(size, size, 1, classes, labels, pixels)
}

/// Train/eval split with equal class proportions, shuffled from `seed`.
/// Returns index lists `(train, eval)`.
pub fn stratified_split(
    labels: &[u16],
    classes: usize,
    eval_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::invalid(
            "stratified_split",
            format!("eval fraction {eval_fraction} outside (0, 1)"),
        ));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] as usize == c).collect();
        rng.shuffle(&mut members);
        let k = (members.len() as f64 * eval_fraction).round() as usize;
        if members.len() >= 2 && (k == 0 || k == members.len()) {
            return Err(Error::invalid(
                "stratified_split",
                format!("class {c} would be empty on one side"),
            ));
        }
        eval.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    if train.is_empty() || eval.is_empty() {
        return Err(Error::invalid("stratified_split", "degenerate split"));
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok((train, eval))
}

/// Class-stratified subset of `indices` keeping `fraction` of every class
/// (rounded), drawn deterministically from `seed`.
pub fn stratified_subset(
    labels: &[u16],
    indices: &[usize],
    classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(
            "stratified_subset",
            format!("fraction {fraction} outside (0, 1]"),
        ));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] as usize == c).collect();
        let k = (members.len() as f64 * fraction).round() as usize;
        if k == 0 {
            return Err(Error::invalid(
                "stratified_subset",
                format!("fraction {fraction} leaves class {c} empty"),
            ));
        }
        if k < members.len() {
            rng.shuffle(&mut members);
            members.truncate(k);
        }
        out.extend(members);
    }
    out.sort_unstable();
    Ok(out)
}

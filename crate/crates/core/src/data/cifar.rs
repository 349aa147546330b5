//! Readers for the CIFAR-10 / CIFAR-100 binary record layout.
//!
//! CIFAR-10 records are `label, 3072 pixels`; CIFAR-100 records are
//! `coarse label, fine label, 3072 pixels`. Pixels are stored channel-major
//! (1024 red, 1024 green, 1024 blue), matching the `[3, 32, 32]` sample shape.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

const PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + PIXELS,
            CifarVariant::Cifar100 => 2 + PIXELS,
        }
    }

    fn label_bytes(self) -> usize {
        self.record_len() - PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Per-channel mean and standard deviation applied after scaling to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const CIFAR100: Normalization = Normalization {
        mean: [0.5071, 0.4867, 0.4408],
        std: [0.2675, 0.2565, 0.2761],
    };
    pub const LOCO: Normalization = Normalization {
        mean: [0.4914, 0.4822, 0.4465],
        std: [0.2470, 0.2435, 0.2616],
    };
}

pub fn normalize_pixel(byte: u8, channel: usize, norm: &Normalization) -> f32 {
    (byte as f32 / 255.0 - norm.mean[channel]) / norm.std[channel]
}

/// Inverse of [`normalize_pixel`], back to the `[0, 1]` scale.
pub fn denormalize_pixel(value: f32, channel: usize, norm: &Normalization) -> f32 {
    value * norm.std[channel] + norm.mean[channel]
}

pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, norm: &Normalization) -> Result<Dataset> {
    let rec = variant.record_len();
    if bytes.is_empty() {
        return Err(Error::format(0, "empty CIFAR file"));
    }
    if bytes.len() % rec != 0 {
        let whole = bytes.len() / rec * rec;
        return Err(Error::format(
            whole as u64,
            format!(
                "trailing partial record of {} bytes (records are {rec} bytes)",
                bytes.len() - whole
            ),
        ));
    }
    let n = bytes.len() / rec;
    let mut features = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    let mut coarse = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let offset = (i * rec) as u64;
        let label = record[variant.label_bytes() - 1] as usize;
        if label >= variant.num_classes() {
            return Err(Error::format(offset, format!("label {label} out of range")));
        }
        if variant == CifarVariant::Cifar100 {
            if record[0] >= 20 {
                return Err(Error::format(offset, format!("coarse label {} out of range", record[0])));
            }
            coarse.push(record[0] as usize);
        }
        labels.push(label);
        let pixels = &record[variant.label_bytes()..];
        features.extend(
            pixels
                .iter()
                .enumerate()
                .map(|(j, &b)| normalize_pixel(b, j / 1024, norm)),
        );
    }
    let ds = Dataset::new(vec![3, 32, 32], features, labels, variant.num_classes())?;
    match variant {
        CifarVariant::Cifar10 => Ok(ds),
        CifarVariant::Cifar100 => ds.with_coarse_labels(coarse),
    }
}

pub fn load_cifar(path: &Path, variant: CifarVariant, norm: &Normalization) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_cifar(&bytes, variant, norm)
}

/// Loads and concatenates several files (CIFAR-10 ships five training batches).
pub fn load_cifar_files(
    paths: &[impl AsRef<Path>],
    variant: CifarVariant,
    norm: &Normalization,
) -> Result<Dataset> {
    let mut it = paths.iter();
    let first = it
        .next()
        .ok_or_else(|| Error::config("no CIFAR files given"))?;
    let mut ds = load_cifar(first.as_ref(), variant, norm)?;
    for p in it {
        ds = ds.concat(&load_cifar(p.as_ref(), variant, norm)?)?;
    }
    Ok(ds)
}

//! `PPDS` cache format for generated datasets.
//!
//! Layout (little-endian): `"PPDS"`, u16 version, u64 rank, u64 dims...,
//! u64 sample count, u32 class count, u8 has-coarse flag, u32 labels,
//! optional u32 coarse labels, u64 feature count, f32 features, u32 CRC32.

use std::path::Path;

use super::Dataset;
use crate::codec::{write_atomic, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PPDS";
const VERSION: u16 = 1;

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u64(ds.sample_shape().len() as u64);
    for &d in ds.sample_shape() {
        w.u64(d as u64);
    }
    w.u64(ds.len() as u64);
    w.u32(ds.num_classes() as u32);
    w.u8(ds.coarse_labels().is_some() as u8);
    for &l in ds.labels() {
        w.u32(l as u32);
    }
    if let Some(c) = ds.coarse_labels() {
        for &l in c {
            w.u32(l as u32);
        }
    }
    w.u64(ds.features().len() as u64);
    for &f in ds.features() {
        w.f32(f);
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, MAGIC, VERSION)?;
    let rank = r.count(8)?;
    let shape = (0..rank)
        .map(|_| r.u64().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = r.count(4)?;
    let classes = r.u32()? as usize;
    let has_coarse = r.u8()?;
    let labels = (0..n)
        .map(|_| r.u32().map(|l| l as usize))
        .collect::<Result<Vec<_>>>()?;
    let coarse = match has_coarse {
        0 => None,
        1 => Some(
            (0..n)
                .map(|_| r.u32().map(|l| l as usize))
                .collect::<Result<Vec<_>>>()?,
        ),
        other => return Err(Error::format(r.offset(), format!("bad coarse flag {other}"))),
    };
    let at = r.offset();
    let len = r.count(4)?;
    let features = (0..len).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let ds = Dataset::new(shape, features, labels, classes)
        .map_err(|e| Error::format(at, e.to_string()))?;
    match coarse {
        Some(c) => ds.with_coarse_labels(c),
        None => Ok(ds),
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(ds))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

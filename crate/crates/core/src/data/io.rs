//! `SDATA1` dataset files.
//!
//! Header: magic `SDATA1`, then `k, n, H, W, c` as little-endian u32. Each of
//! the `n` samples follows as: label (u32), `c·H·W` image values (f64), and
//! `H·W` part-mask bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, Sample};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 6] = b"SDATA1";

pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    for v in [ds.classes, ds.len(), ds.height, ds.width, ds.channels] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for s in &ds.samples {
        w.write_all(&s.label.to_le_bytes())?;
        for v in s.image.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&s.part_mask)?;
    }
    w.flush()?;
    Ok(())
}

fn u32_at<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated dataset".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("dataset too short".into()))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not an SDATA1 dataset".into()));
    }
    let k = u32_at(&mut r)? as usize;
    let n = u32_at(&mut r)? as usize;
    let h = u32_at(&mut r)? as usize;
    let w = u32_at(&mut r)? as usize;
    let c = u32_at(&mut r)? as usize;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    let mut samples = Vec::with_capacity(n);
    let mut img_bytes = vec![0u8; c * h * w * 8];
    for _ in 0..n {
        let label = u32_at(&mut r)?;
        if label == 0 || label as usize > k {
            return Err(Error::Format(format!("label {label} outside 1..={k}")));
        }
        r.read_exact(&mut img_bytes)
            .map_err(|_| Error::Format("truncated dataset".into()))?;
        let data: Vec<f64> = img_bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let mut part_mask = vec![0u8; h * w];
        r.read_exact(&mut part_mask)
            .map_err(|_| Error::Format("truncated dataset".into()))?;
        samples.push(Sample {
            image: Tensor::new(&[c, h, w], data).map_err(|e| Error::Format(e.to_string()))?,
            label,
            part_mask,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after last sample".into()));
    }
    Ok(Dataset {
        classes: k,
        channels: c,
        height: h,
        width: w,
        samples,
    })
}

impl Dataset {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_dataset(BufWriter::new(File::create(path)?), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_dataset(BufReader::new(File::open(path)?))
    }
}

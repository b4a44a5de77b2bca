//! `SATTN1` parameter files.
//!
//! Layout: the magic bytes `SATTN1`, then for each parameter in order: name
//! length (u32), name bytes (UTF-8), rank (u32), each dimension (u64), and the
//! values as little-endian `f64`. The file ends after the last parameter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Encoder, EncoderConfig};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"SATTN1";

pub fn write_parameters<W: Write>(mut w: W, params: &[(String, Tensor)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_parameters<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint too short".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a SATTN1 checkpoint".into()));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let mut cur = std::io::Cursor::new(rest);
    let total = cur.get_ref().len() as u64;
    let mut out = Vec::new();
    while cur.position() < total {
        let truncated = |_| Error::Format("truncated checkpoint".into());
        let name_len = read_u32(&mut cur).map_err(truncated)? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut cur).map_err(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            cur.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        if (n as u64).saturating_mul(8) > total - cur.position() {
            return Err(Error::Format(format!("parameter `{name}` overruns the file")));
        }
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            cur.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?));
    }
    Ok(out)
}

impl Encoder {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_parameters(BufWriter::new(File::create(path)?), self.parameters())
    }

    pub fn load(config: EncoderConfig, path: impl AsRef<Path>) -> Result<Self> {
        let params = read_parameters(BufReader::new(File::open(path)?))?;
        Encoder::from_parameters(config, params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_parameters(&mut buf, self.parameters()).expect("writing to a Vec cannot fail");
        buf
    }
}

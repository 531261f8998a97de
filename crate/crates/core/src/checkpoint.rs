//! Flat binary weight snapshots.
//!
//! Values are stored as little-endian f64 bits. f32 weights widen exactly and
//! narrow back to the identical bit pattern, so a save/load round trip is
//! lossless in either precision.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 4] = b"SQWT";
const VERSION: u32 = 1;

pub fn save<T: Element>(path: &Path, params: &[(String, Tensor<T>)]) -> Result<()> {
    let total: usize = params.iter().map(|(_, t)| t.len()).sum();
    let mut buf = Vec::with_capacity(16 + total * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data().iter() {
            buf.extend_from_slice(&x.to_f64().to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.at..e];
                self.at = e;
                Ok(s)
            }
            None => Err(Error::Input("checkpoint file is truncated".into())),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a snapshot into an existing registry. Record names and shapes must
/// match the registry exactly, in order — a checkpoint only fits the
/// configuration it was written from.
pub fn load_into<T: Element>(path: &Path, params: &[(String, Tensor<T>)]) -> Result<()> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Input("not a weight snapshot (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Input(format!(
            "unsupported snapshot version {version}"
        )));
    }
    let count = r.u64()? as usize;
    if count != params.len() {
        return Err(Error::Input(format!(
            "snapshot holds {count} tensors, model has {}",
            params.len()
        )));
    }
    for (name, t) in params {
        let name_len = r.u64()? as usize;
        let stored = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Input("snapshot record name is not UTF-8".into()))?;
        if stored != name {
            return Err(Error::Input(format!(
                "snapshot record {stored:?} does not match model parameter {name:?}"
            )));
        }
        let ndim = r.u64()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        if shape != t.shape() {
            return Err(Error::Input(format!(
                "snapshot shape {shape:?} for {name} does not match model shape {:?}",
                t.shape()
            )));
        }
        let raw = r.take(t.len() * 8)?;
        let values: Vec<T> = raw
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        t.update_data(|v, i| *v = values[i]);
    }
    if r.at != bytes.len() {
        return Err(Error::Input("trailing bytes after last snapshot record".into()));
    }
    Ok(())
}

//! Flat binary parameter checkpoints.
//!
//! Layout: the magic `SRB1`, then one record per tensor until end of file:
//! `u32` name length, name bytes (UTF-8), `u32` rank, `rank` × `u32` dims,
//! then the values as little-endian `f32`. All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::network::ParameterSet;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SRB1";

pub fn encode<T: Scalar>(params: &ParameterSet<T>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated record, needed {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<ParameterSet<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.fail("missing SRB1 magic"));
    }
    let mut tensors = BTreeMap::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| r.fail("tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = r.take(count.checked_mul(4).ok_or_else(|| r.fail("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::from_finite(dims, data).map_err(|e| r.fail(format!("`{name}`: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(r.fail(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(ParameterSet::from_map(tensors))
}

pub fn save<T: Scalar>(params: &ParameterSet<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParameterSet<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

//! Binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   8 bytes  "LECBPARM"
//! version u32      = 1
//! count   u32
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, values f64 × prod(dims) }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LECBPARM";
const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for d in p.tensor.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint into a fresh store carrying `seed`.
pub fn decode(bytes: &[u8], seed: u64, path: &Path) -> Result<ParamStore> {
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(fmt)? != MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = r.u32().map_err(fmt)?;
    if version != VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let count = r.u32().map_err(fmt)?;
    let mut store = ParamStore::new(seed);
    for _ in 0..count {
        let n = r.u32().map_err(fmt)? as usize;
        let name = String::from_utf8(r.take(n).map_err(fmt)?.to_vec())
            .map_err(|e| fmt(e.to_string()))?;
        let ndim = r.u32().map_err(fmt)? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(fmt)?;
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| r.f64())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(fmt)?;
        store.insert(&name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(fmt("trailing bytes".into()));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, seed: u64) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, seed, path)
}

/// Copies values from `src` into `dst` by name; every name must match in shape.
pub fn restore_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    for (_, p) in src.iter() {
        let t = dst
            .get_mut(&p.name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has unknown parameter {}", p.name)))?;
        if t.shape() != p.tensor.shape() {
            return Err(Error::Shape {
                op: "restore",
                lhs: t.shape().to_vec(),
                rhs: p.tensor.shape().to_vec(),
            });
        }
        *t = p.tensor.clone();
    }
    Ok(())
}

//! Named-tensor checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic  "RBCK"
//! u32    format version (1)
//! u32    metadata length, then that many UTF-8 bytes (JSON)
//! u32    tensor count
//! per tensor: u32 name length, name bytes, u8 dtype (0 = f32),
//!             u32 rank, rank x u32 dims
//! tensor payloads in header order, f32 values
//! ```

use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RBCK";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn to_bytes(store: &ParamStore<f32>, metadata: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<(ParamStore<f32>, String)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| Error::Data("checkpoint metadata is not UTF-8".into()))?;
    let count = r.u32()? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Data(format!("tensor `{name}` has unknown dtype {dtype}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        headers.push((name, shape));
    }
    let mut store = ParamStore::new();
    for (name, shape) in headers {
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Data("trailing bytes after checkpoint payload".into()));
    }
    Ok((store, metadata))
}

pub fn save(path: &Path, store: &ParamStore<f32>, metadata: &str) -> Result<()> {
    std::fs::write(path, to_bytes(store, metadata)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore<f32>, String)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

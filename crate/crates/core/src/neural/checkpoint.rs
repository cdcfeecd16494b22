//! Versioned binary container for named tensors and opaque blobs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "CLMCKPT\0"
//! version   u32      currently 1
//! meta_len  u64      followed by meta_len bytes of UTF-8 JSON
//! n_tensors u32
//!   name_len u32, name bytes, ndim u32, dims u64 * ndim, values f64 * prod(dims)
//! n_blobs   u32
//!   name_len u32, name bytes, len u64, bytes
//! ```
//!
//! Tensors keep their insertion order, so writing the same content twice
//! produces identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::optim::{Moments, OptimizerState};
use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CLMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
    pub blobs: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn new(meta: impl Serialize) -> Result<Self> {
        Ok(Checkpoint { meta: serde_json::to_value(meta)?, tensors: Vec::new(), blobs: Vec::new() })
    }

    pub fn meta_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }

    pub fn push_params(&mut self, prefix: &str, params: &ParameterSet) {
        for (name, t) in params.iter() {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    /// Adam moments as `adam.m.<name>`, `adam.v.<name>`, `adam.t.<name>`.
    pub fn push_optimizer(&mut self, prefix: &str, params: &ParameterSet, opt: &OptimizerState) {
        for id in params.ids() {
            if let Some(m) = opt.moments(id) {
                let name = params.name(id);
                self.tensors.push((format!("{prefix}adam.m.{name}"), m.m.clone()));
                self.tensors.push((format!("{prefix}adam.v.{name}"), m.v.clone()));
                self.tensors.push((format!("{prefix}adam.t.{name}"), Tensor::scalar(m.t as f64)));
            }
        }
    }

    pub fn restore_optimizer(&self, prefix: &str, params: &ParameterSet, opt: &mut OptimizerState) {
        for id in params.ids() {
            let name = params.name(id);
            let m = self.tensor(&format!("{prefix}adam.m.{name}"));
            let v = self.tensor(&format!("{prefix}adam.v.{name}"));
            let t = self.tensor(&format!("{prefix}adam.t.{name}"));
            if let (Some(m), Some(v), Some(t)) = (m, v, t) {
                opt.set_moments(id, Moments { m: m.clone(), v: v.clone(), t: t.item() as u64 });
            }
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        self.tensors.iter().filter_map(move |(n, t)| n.strip_prefix(prefix).map(|s| (s, t)))
    }

    pub fn blob(&self, name: &str) -> Option<&[u8]> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut buf, name);
            let dims = t.shape();
            buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, b) in &self.blobs {
            put_str(&mut buf, name);
            buf.extend_from_slice(&(b.len() as u64).to_le_bytes());
            buf.extend_from_slice(b);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor::new(&bytes);
        if cur.take(8)? != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = cur.u64()? as usize;
        let meta = serde_json::from_slice(cur.take(meta_len)?)?;
        let n = cur.u32()?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = cur.string()?;
            let ndim = cur.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cur.u64()? as usize);
            }
            let count: usize = dims.iter().product();
            let raw = cur.take(count * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let (rows, cols) = match dims.as_slice() {
                [] => (1, 1),
                [c] => (1, *c),
                [r, c] => (*r, *c),
                _ => return Err(Error::format("tensors have at most two dimensions")),
            };
            tensors.push((name, Tensor::from_vec(rows, cols, data)?));
        }
        let nb = cur.u32()?;
        let mut blobs = Vec::with_capacity(nb as usize);
        for _ in 0..nb {
            let name = cur.string()?;
            let len = cur.u64()? as usize;
            blobs.push((name, cur.take(len)?.to_vec()));
        }
        if cur.pos != bytes.len() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { meta, tensors, blobs })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("invalid UTF-8 name"))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

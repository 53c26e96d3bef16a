//! Flat key → tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "FLXCKPT1"
//! n_meta       u32
//!   key_len u32, key utf-8, val_len u32, val utf-8      (n_meta times)
//! n_tensors    u32
//!   key_len u32, key utf-8, ndim u32, dims u64 x ndim,
//!   values f64 x product(dims)                          (n_tensors times)
//! ```
//!
//! Entries are written in sorted key order, so equal archives serialize to
//! identical bytes. Tensor keys are `/`-separated component paths such as
//! `decoder/w_ih` or `generator/layer1/bias`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::Parameters;

const MAGIC: &[u8; 8] = b"FLXCKPT1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn from_params<P: Parameters + ?Sized>(p: &P, prefix: &str) -> Self {
        let mut archive = Archive::default();
        archive.insert_params(p, prefix);
        archive
    }

    pub fn insert_params<P: Parameters + ?Sized>(&mut self, p: &P, prefix: &str) {
        p.visit(prefix, &mut |name, t| {
            self.tensors.insert(name, t.clone());
        });
    }

    /// Copies archive values into `p`; every parameter key must be present
    /// with a matching shape.
    pub fn load_params<P: Parameters + ?Sized>(&self, p: &mut P, prefix: &str) -> Result<()> {
        let mut failure = None;
        p.visit_mut(prefix, &mut |name, t| {
            if failure.is_some() {
                return;
            }
            match self.tensors.get(&name) {
                None => failure = Some(Error::Checkpoint(format!("missing tensor `{name}`"))),
                Some(src) if src.shape() != t.shape() => {
                    failure = Some(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                Some(src) => {
                    if let Err(e) = t.set_data(src.data().to_vec()) {
                        failure = Some(e);
                    }
                }
            }
        });
        failure.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.meta.len());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len());
        for (k, t) in &self.tensors {
            put_str(&mut out, k);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut archive = Archive::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            archive.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let key = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{key}: {e}")))?;
            archive.tensors.insert(key, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(n as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 key".into()))
    }
}

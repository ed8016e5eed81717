//! Versioned binary container for named tensors.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic      4 bytes   b"TNS1"
//! meta_len   u32       UTF-8 metadata block length
//! meta       ...       TOML text (kind, version, hashes, ...)
//! count      u32       tensor record count
//! record     count x:
//!   name_len u16
//!   name     ...       UTF-8
//!   ndim     u8
//!   dims     ndim x u32
//!   dtype    u8        0 = f64 little-endian
//!   data     prod(dims) x 8 bytes
//! ```
//!
//! Reads are strict: any truncation or malformed field produces an
//! integrity error naming the field, and values must be finite.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::Tensor;

const MAGIC: &[u8; 4] = b"TNS1";
const DTYPE_F64: u8 = 0;

/// A metadata block plus named tensors, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new(meta: String) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Integrity(format!("missing tensor record {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            out.push(DTYPE_F64);
            out.extend_from_slice(&t.bytes_le());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Integrity("bad magic, not a tensor container".into()));
        }
        let meta_len = r.u32("meta_len")? as usize;
        let meta = String::from_utf8(r.take(meta_len, "meta")?.to_vec())
            .map_err(|_| Error::Integrity("meta is not UTF-8".into()))?;
        let count = r.u32("count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let name_len = r.u16(&format!("record {i} name_len"))? as usize;
            let name = String::from_utf8(r.take(name_len, &format!("record {i} name"))?.to_vec())
                .map_err(|_| Error::Integrity(format!("record {i} name is not UTF-8")))?;
            let ndim = r.u8(&format!("tensor {name:?} ndim"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for d in 0..ndim {
                shape.push(r.u32(&format!("tensor {name:?} dim {d}"))? as usize);
            }
            let dtype = r.u8(&format!("tensor {name:?} dtype"))?;
            if dtype != DTYPE_F64 {
                return Err(Error::Integrity(format!("tensor {name:?} has unknown dtype {dtype}")));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8, &format!("tensor {name:?} data"))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let tensor = Tensor::from_vec(&shape, data)
                .map_err(|e| Error::Integrity(format!("tensor {name:?}: {e}")))?;
            tensors.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after final record",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity(format!("unexpected end of file while reading {field}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }
}

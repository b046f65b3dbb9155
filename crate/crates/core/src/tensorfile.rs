//! Self-describing little-endian tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | offset      | size        | field                                              |
//! |-------------|-------------|----------------------------------------------------|
//! | 0           | 4           | magic `b"VPTN"`                                    |
//! | 4           | 1           | dtype tag: `1` = f32, `2` = f64                    |
//! | 5           | 1           | ndim                                               |
//! | 6           | 8 × ndim    | dims, u64 each                                     |
//! | ..          | 8           | payload byte length (u64)                          |
//! | ..          | payload     | row-major element data                             |
//! | ..          | 4           | metadata byte length (u32)                         |
//! | ..          | metadata    | UTF-8 text, one `key=value` line per entry, `\n`-terminated, keys sorted |
//!
//! The file ends exactly after the metadata block.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result, TensorFileError};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"VPTN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, TensorFileError> {
        match tag {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            t => Err(TensorFileError::UnknownDtype(t)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A tensor plus its on-disk dtype and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dtype: Dtype,
    pub tensor: Tensor,
    pub metadata: BTreeMap<String, String>,
}

impl TensorFile {
    pub fn new(tensor: Tensor) -> Self {
        TensorFile {
            dtype: Dtype::F32,
            tensor,
            metadata: BTreeMap::new(),
        }
    }

    pub fn f64(tensor: Tensor) -> Self {
        TensorFile {
            dtype: Dtype::F64,
            tensor,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if !self.tensor.is_finite() {
            return Err(Error::validation("tensor contains non-finite values"));
        }
        let dims = self.tensor.dims();
        if dims.len() > u8::MAX as usize {
            return Err(Error::validation(format!("too many dims: {}", dims.len())));
        }
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::validation(format!("invalid metadata entry {k:?}")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let payload = self.tensor.len() * self.dtype.size();
        let mut out = Vec::with_capacity(6 + 8 * dims.len() + 8 + payload + 4 + meta.len());
        out.extend_from_slice(&MAGIC);
        out.push(self.dtype.tag());
        out.push(dims.len() as u8);
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(payload as u64).to_le_bytes());
        match self.dtype {
            Dtype::F32 => {
                for &v in self.tensor.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in self.tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TensorFileError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(TensorFileError::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let dtype = Dtype::from_tag(r.take(1)?[0])?;
        let ndim = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let payload = r.u64()?;
        let expected = dims
            .iter()
            .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d as u64));
        if expected != Some(payload) {
            return Err(TensorFileError::PayloadMismatch {
                dims,
                payload,
                expected: expected.unwrap_or(u64::MAX),
            });
        }
        let raw = r.take(payload as usize)?;
        let data: Vec<f64> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let meta_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let meta_raw = r.take(meta_len)?;
        if r.pos != bytes.len() {
            return Err(TensorFileError::TrailingBytes(bytes.len() - r.pos));
        }
        let text = std::str::from_utf8(meta_raw)
            .map_err(|e| TensorFileError::Metadata(e.to_string()))?;
        let mut metadata = BTreeMap::new();
        for line in text.split_terminator('\n') {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TensorFileError::Metadata(format!("line without '=': {line:?}")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let tensor = Tensor::new(dims, data).expect("payload length checked against dims");
        Ok(TensorFile {
            dtype,
            tensor,
            metadata,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorFileError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(TensorFileError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, TensorFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn write_tensor(path: impl AsRef<Path>, file: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    let bytes = file.encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorFile::decode(&bytes).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })
}

//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DAVT" | version: u16 | dtype: u8 (0 = f32, 1 = f64) | rank: u8 | dims: rank x u64 | payload
//! ```
//!
//! The payload is the row-major element data in the stated dtype.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{DavitError, Result};
use crate::tensor::{numel, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DAVT";
pub const VERSION: u16 = 1;

fn format_err(msg: impl Into<String>) -> DavitError {
    DavitError::Format(msg.into())
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// A decoded tensor of whichever dtype the file holds.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested element type.
    pub fn into_dtype<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

/// Decodes one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(format_err("bad magic, not a DAVT tensor"));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(format_err(format!(
            "unsupported tensor container version {version}"
        )));
    }
    let dtype =
        DType::from_code(cur.take(1)?[0]).ok_or_else(|| format_err("unknown dtype code"))?;
    let rank = cur.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| format_err("dimension overflows usize"))?);
    }
    let n = numel(&shape);
    let payload = n
        .checked_mul(dtype.size())
        .ok_or_else(|| format_err("payload size overflows"))?;
    let raw = cur.take(payload)?;
    let t = match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(
            &shape,
            raw.chunks_exact(4).map(f32::read_le).collect(),
        )?),
        DType::F64 => AnyTensor::F64(Tensor::new(
            &shape,
            raw.chunks_exact(8).map(f64::read_le).collect(),
        )?),
    };
    Ok((t, cur.pos))
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(format_err("trailing bytes after tensor payload"));
    }
    Ok(t)
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_err("unexpected end of data (truncated file)")),
        }
    }
}

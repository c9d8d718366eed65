//! `TNSR` binary arrays.
//!
//! Layout: `"TNSR"` | version u8 = 1 | dtype u8 (1 = f32, 2 = f64) | ndim u8 |
//! reserved u8 | ndim × u32 LE dims | row-major LE payload.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u8 = 1;
const HEADER: usize = 8;

#[derive(Debug, Error)]
pub enum TnsrError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a TNSR file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported TNSR version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("file holds {found:?} data, {expected:?} requested")]
    DtypeMismatch { expected: Dtype, found: Dtype },
    #[error("tensor must have at least one dimension")]
    EmptyShape,
    #[error("dimension {0} is zero")]
    ZeroDim(usize),
    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("trailing bytes after payload: expected {expected}, found {found}")]
    TrailingBytes { expected: usize, found: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

impl TnsrError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u8 {
        match self {
            TnsrError::Io(_) => 1,
            TnsrError::BadMagic(_) => 2,
            TnsrError::UnsupportedVersion(_) => 3,
            TnsrError::UnknownDtype(_) => 4,
            TnsrError::DtypeMismatch { .. } => 5,
            TnsrError::EmptyShape => 6,
            TnsrError::ZeroDim(_) => 7,
            TnsrError::Truncated { .. } => 8,
            TnsrError::TrailingBytes { .. } => 9,
            TnsrError::NonFinite(_) => 10,
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>, TnsrError> {
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(TnsrError::NonFinite(i));
    }
    let shape = t.shape();
    let ndim = u8::try_from(shape.len()).map_err(|_| TnsrError::EmptyShape)?;
    let mut out = Vec::with_capacity(HEADER + 4 * shape.len() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, T::DTYPE.code(), ndim, 0]);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize) -> Result<&'a [u8], TnsrError> {
    bytes.get(at..at + n).ok_or(TnsrError::Truncated {
        needed: at + n,
        found: bytes.len(),
    })
}

/// Parses the header: dtype, shape and payload offset.
pub fn decode_header(bytes: &[u8]) -> Result<(Dtype, Vec<usize>, usize), TnsrError> {
    let head = take(bytes, 0, HEADER)?;
    let magic = [head[0], head[1], head[2], head[3]];
    if &magic != MAGIC {
        return Err(TnsrError::BadMagic(magic));
    }
    if head[4] != VERSION {
        return Err(TnsrError::UnsupportedVersion(head[4]));
    }
    let dtype = Dtype::from_code(head[5]).ok_or(TnsrError::UnknownDtype(head[5]))?;
    let ndim = head[6] as usize;
    if ndim == 0 {
        return Err(TnsrError::EmptyShape);
    }
    let dims = take(bytes, HEADER, 4 * ndim)?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(TnsrError::ZeroDim(axis));
    }
    Ok((dtype, shape, HEADER + 4 * ndim))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>, TnsrError> {
    let (dtype, shape, offset) = decode_header(bytes)?;
    if dtype != T::DTYPE {
        return Err(TnsrError::DtypeMismatch {
            expected: T::DTYPE,
            found: dtype,
        });
    }
    let n: usize = shape.iter().product();
    let size = dtype.size();
    let payload = take(bytes, offset, n * size)?;
    if bytes.len() != offset + n * size {
        return Err(TnsrError::TrailingBytes {
            expected: offset + n * size,
            found: bytes.len(),
        });
    }
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Ok(Tensor::new(shape, data).expect("validated shape"))
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<(), TnsrError> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>, TnsrError> {
    decode(&fs::read(path)?)
}

/// Dtype and shape of a stored tensor.
pub fn read_tensor_header(path: &Path) -> Result<(Dtype, Vec<usize>), TnsrError> {
    let bytes = fs::read(path)?;
    let (dtype, shape, _) = decode_header(&bytes)?;
    Ok((dtype, shape))
}

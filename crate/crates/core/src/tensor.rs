//! `CBTF` tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size      | field                                  |
//! |--------|-----------|----------------------------------------|
//! | 0      | 4         | magic `b"CBTF"`                        |
//! | 4      | 1         | version (`1`)                          |
//! | 5      | 1         | dtype: 0=f32, 1=f64, 2=c64, 3=c128     |
//! | 6      | 1         | rank `r`                               |
//! | 7      | 8·r       | dims, `u64` each                       |
//! | 7+8r   | elem·Πdims| payload, row-major; complex as (re,im) |

use std::path::Path;

use num_complex::{Complex32, Complex64};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CBTF";
pub const VERSION: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("bad magic {found:?}, expected \"CBTF\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated {section}: need {expected} bytes, found {available} ({missing} bytes missing)")]
    Truncated {
        section: &'static str,
        expected: usize,
        available: usize,
        missing: usize,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("expected {expected} data, found {found}")]
    WrongDtype {
        expected: &'static str,
        found: &'static str,
    },
    #[error("dims overflow")]
    Overflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    C64,
    C128,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::C64 => 2,
            Dtype::C128 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TensorError> {
        Ok(match code {
            0 => Dtype::F32,
            1 => Dtype::F64,
            2 => Dtype::C64,
            3 => Dtype::C128,
            other => return Err(TensorError::UnknownDtype(other)),
        })
    }

    pub fn element_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::C64 => 8,
            Dtype::C128 => 16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::C64 => "c64",
            Dtype::C128 => "c128",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    C64(Vec<Complex32>),
    C128(Vec<Complex64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::C64(_) => Dtype::C64,
            TensorData::C128(_) => Dtype::C128,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::C64(v) => v.len(),
            TensorData::C128(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        let n = element_count(&dims)?;
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                expected: dims,
                found: vec![data.len()],
            });
        }
        Ok(Self { dims, data })
    }

    pub fn real(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F64(data))
    }

    pub fn complex(dims: Vec<usize>, data: Vec<Complex64>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::C128(data))
    }

    /// Real payload widened to `f64`.
    pub fn to_f64(&self) -> Result<Vec<f64>, TensorError> {
        match &self.data {
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TensorData::F64(v) => Ok(v.clone()),
            other => Err(TensorError::WrongDtype {
                expected: "real",
                found: other.dtype().name(),
            }),
        }
    }

    /// Complex payload widened to `Complex64`.
    pub fn to_c128(&self) -> Result<Vec<Complex64>, TensorError> {
        match &self.data {
            TensorData::C64(v) => Ok(v
                .iter()
                .map(|z| Complex64::new(z.re as f64, z.im as f64))
                .collect()),
            TensorData::C128(v) => Ok(v.clone()),
            other => Err(TensorError::WrongDtype {
                expected: "complex",
                found: other.dtype().name(),
            }),
        }
    }

    pub fn expect_dims(&self, expected: &[usize]) -> Result<(), TensorError> {
        if self.dims != expected {
            return Err(TensorError::ShapeMismatch {
                expected: expected.to_vec(),
                found: self.dims.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.data.dtype();
        let mut out =
            Vec::with_capacity(7 + 8 * self.dims.len() + dtype.element_size() * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(dtype.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::C64(v) => v.iter().for_each(|z| {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }),
            TensorData::C128(v) => v.iter().for_each(|z| {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let header = take(bytes, 0, 7, "header")?;
        if &header[..4] != MAGIC {
            return Err(TensorError::BadMagic {
                found: header[..4].to_vec(),
            });
        }
        if header[4] != VERSION {
            return Err(TensorError::UnsupportedVersion(header[4]));
        }
        let dtype = Dtype::from_code(header[5])?;
        let rank = header[6] as usize;
        let dim_bytes = take(bytes, 7, 8 * rank, "dims")?;
        let dims: Vec<usize> = dim_bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n = element_count(&dims)?;
        let payload_len = n
            .checked_mul(dtype.element_size())
            .ok_or(TensorError::Overflow)?;
        let start = 7 + 8 * rank;
        let payload = take(bytes, start, payload_len, "payload")?;
        let trailing = bytes.len() - start - payload_len;
        if trailing > 0 {
            return Err(TensorError::TrailingBytes(trailing));
        }
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::C64 => TensorData::C64(
                payload
                    .chunks_exact(8)
                    .map(|c| {
                        Complex32::new(
                            f32::from_le_bytes(c[..4].try_into().unwrap()),
                            f32::from_le_bytes(c[4..].try_into().unwrap()),
                        )
                    })
                    .collect(),
            ),
            Dtype::C128 => TensorData::C128(
                payload
                    .chunks_exact(16)
                    .map(|c| {
                        Complex64::new(
                            f64::from_le_bytes(c[..8].try_into().unwrap()),
                            f64::from_le_bytes(c[8..].try_into().unwrap()),
                        )
                    })
                    .collect(),
            ),
        };
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| crate::Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| crate::Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

fn element_count(dims: &[usize]) -> Result<usize, TensorError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(TensorError::Overflow)
}

fn take<'a>(
    bytes: &'a [u8],
    start: usize,
    len: usize,
    section: &'static str,
) -> Result<&'a [u8], TensorError> {
    let available = bytes.len().saturating_sub(start);
    if available < len {
        return Err(TensorError::Truncated {
            section,
            expected: len,
            available,
            missing: len - available,
        });
    }
    Ok(&bytes[start..start + len])
}

//! The `DRTF` binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                  |
//! |------------------|------------------------------------------|
//! | 4                | magic `b"DRTF"`                          |
//! | 4                | version, `u32` (currently 1)             |
//! | 4                | `ndim`, `u32`                            |
//! | 8 * ndim         | dims, `u64` each                         |
//! | 4 * prod(dims)   | row-major IEEE-754 `f32` payload         |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, Shape};

pub const MAGIC: [u8; 4] = *b"DRTF";
pub const VERSION: u32 = 1;

/// An n-dimensional `f32` array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let n = element_count(&dims)?;
        if n != data.len() as u64 {
            return Err(Error::InvalidShape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    /// Stacks equally shaped images into an `(N, H, W, C)` tensor.
    pub fn from_images(images: &[Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Empty("no images to stack".into()))?;
        let s = first.shape();
        let mut data = Vec::with_capacity(images.len() * s.len());
        for img in images {
            first.check_same_shape(img)?;
            data.extend(img.data().iter().map(|&v| v as f32));
        }
        Tensor::new(
            vec![
                images.len() as u64,
                s.height as u64,
                s.width as u64,
                s.channels as u64,
            ],
            data,
        )
    }

    /// Splits an `(N, H, W, C)` or `(N, H, W)` tensor into images.
    pub fn to_images(&self) -> Result<Vec<Image>> {
        let shape = match self.dims.as_slice() {
            [_, h, w, c] => Shape::new(*h as usize, *w as usize, *c as usize)?,
            [_, h, w] => Shape::new(*h as usize, *w as usize, 1)?,
            other => {
                return Err(Error::InvalidShape(format!(
                    "expected an (N, H, W[, C]) tensor, got dims {other:?}"
                )))
            }
        };
        self.data
            .chunks_exact(shape.len())
            .map(|chunk| Image::new(shape, chunk.iter().map(|&v| v as f64).collect()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let ndim = cur.u32()? as usize;
        let dims = (0..ndim).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
        let n = element_count(&dims)?;
        let expected = n
            .checked_mul(4)
            .ok_or_else(|| Error::InvalidShape(format!("dims {dims:?} overflow")))?;
        let rest = &bytes[cur.pos..];
        if (rest.len() as u64) < expected {
            return Err(Error::Truncated {
                expected,
                found: rest.len() as u64,
            });
        }
        if rest.len() as u64 > expected {
            return Err(Error::InvalidShape(format!(
                "{} trailing bytes after payload",
                rest.len() as u64 - expected
            )));
        }
        let data = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { dims, data })
    }
}

fn element_count(dims: &[u64]) -> Result<u64> {
    dims.iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidShape(format!("dims {dims:?} overflow")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

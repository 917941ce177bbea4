//! Flat real-valued images in the canonical `[-1, 1]` domain and their 8-bit
//! import/export.
//!
//! Pixel conversion is the fixed affine map `p = clamp(round((x + 1) * 127.5), 0, 255)`
//! and its inverse `x = p / 127.5 - 1`.

use std::fmt;
use std::path::Path;

use ::image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};

/// Image dimensions `(height, width, channels)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidShape(format!(
                "({height}, {width}, {channels}) has a zero dimension"
            )));
        }
        Ok(Shape {
            height,
            width,
            channels,
        })
    }

    /// Number of scalar entries `H * W * C`.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major index of `(row, col, channel)`.
    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.height, self.width, self.channels)
    }
}

/// Converts an 8-bit pixel level to the canonical domain.
#[inline]
pub fn from_8bit(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// Converts a canonical value to an 8-bit pixel level (clamp-and-round).
#[inline]
pub fn to_8bit(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// A row-major `H x W x C` image stored as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

impl Image {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::InvalidShape(format!(
                "{} values do not fill shape {shape}",
                data.len()
            )));
        }
        Ok(Image { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Image {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Image {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_8bit(shape: Shape, pixels: &[u8]) -> Result<Self> {
        Image::new(shape, pixels.iter().map(|&p| from_8bit(p)).collect())
    }

    pub fn to_8bit(&self) -> Vec<u8> {
        self.data.iter().map(|&x| to_8bit(x)).collect()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_string(),
                actual: other.shape.to_string(),
            });
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Returns `self * k`.
    pub fn scaled(&self, k: f64) -> Image {
        Image {
            shape: self.shape,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    /// Decodes an 8-bit grayscale or RGB file (PNG, PGM, PPM).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let decoded = ::image::open(path).map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        match decoded {
            DynamicImage::ImageLuma8(buf) => Image::from_8bit(Shape::new(h, w, 1)?, buf.as_raw()),
            DynamicImage::ImageRgb8(buf) => Image::from_8bit(Shape::new(h, w, 3)?, buf.as_raw()),
            other => Err(Error::ImageDecode {
                path: path.to_path_buf(),
                message: format!("unsupported pixel layout {:?}", other.color()),
            }),
        }
    }

    /// Encodes with the canonical clamp-and-round rule. The format follows the
    /// extension: `.png`, `.pgm` (1 channel) or `.ppm` (3 channels).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let format = ImageFormat::from_path(path)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        let color = match self.shape.channels {
            1 => ::image::ExtendedColorType::L8,
            3 => ::image::ExtendedColorType::Rgb8,
            c => {
                return Err(Error::InvalidShape(format!(
                    "cannot export an image with {c} channels"
                )))
            }
        };
        ::image::save_buffer_with_format(
            path,
            &self.to_8bit(),
            self.shape.width as u32,
            self.shape.height as u32,
            color,
            format,
        )
        .map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Tiles images into a single grid image with `cols` columns.
pub fn tile(images: &[Image], cols: usize) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("no images to tile".into()))?;
    let s = first.shape();
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let out_shape = Shape::new(rows * s.height, cols * s.width, s.channels)?;
    let mut out = Image::filled(out_shape, -1.0);
    for (k, img) in images.iter().enumerate() {
        first.check_same_shape(img)?;
        let (gr, gc) = (k / cols, k % cols);
        for r in 0..s.height {
            for c in 0..s.width {
                for ch in 0..s.channels {
                    let dst = out_shape.index(gr * s.height + r, gc * s.width + c, ch);
                    out.data[dst] = img.data[s.index(r, c, ch)];
                }
            }
        }
    }
    Ok(out)
}

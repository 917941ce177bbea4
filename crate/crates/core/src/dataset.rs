//! Training sets: the support points of the empirical delta mixture.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{from_8bit, to_8bit, Image, Shape};
use crate::rng::SeededRng;
use crate::tensor_file::read_tensor;

const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm", "ppm", "pnm"];

/// `N >= 1` equally shaped images with optional class labels.
///
/// Each image remembers its index in the collection it was originally loaded
/// from, so that seeded subsetting is a function of the image identity rather
/// than of its current position.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<Image>,
    labels: Option<Vec<u32>>,
    source_indices: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Option<Vec<u32>>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Empty("dataset has no images".into()))?;
        for img in &images {
            first.check_same_shape(img)?;
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
        }
        let source_indices = (0..images.len()).collect();
        Ok(Dataset {
            images,
            labels,
            source_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.images[0].shape()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.images[i]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    /// Keeps the `size` images with the smallest seeded sort keys, ordered by
    /// key. Keys depend only on `(seed, source index)`, so nested subsets
    /// agree: `subset(n, s).subset(m, s) == subset(m, s)` for `m <= n`.
    pub fn subset(&self, size: usize, seed: u64) -> Result<Dataset> {
        if size == 0 || size > self.len() {
            return Err(Error::InvalidArgument(format!(
                "subset size {size} not in 1..={}",
                self.len()
            )));
        }
        let mut order: Vec<(u64, usize, usize)> = self
            .source_indices
            .iter()
            .enumerate()
            .map(|(pos, &src)| (SeededRng::new(seed, src as u64).next_u64(), src, pos))
            .collect();
        order.sort_unstable();
        order.truncate(size);
        Ok(self.select(order.iter().map(|&(_, _, pos)| pos)))
    }

    /// The first `size` images in current order.
    pub fn truncated(&self, size: usize) -> Result<Dataset> {
        if size == 0 || size > self.len() {
            return Err(Error::InvalidArgument(format!(
                "limit {size} not in 1..={}",
                self.len()
            )));
        }
        Ok(self.select(0..size))
    }

    fn select(&self, positions: impl Iterator<Item = usize>) -> Dataset {
        let positions: Vec<usize> = positions.collect();
        Dataset {
            images: positions.iter().map(|&p| self.images[p].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| positions.iter().map(|&p| l[p]).collect()),
            source_indices: positions.iter().map(|&p| self.source_indices[p]).collect(),
        }
    }

    /// Smooth random color fields quantized to the 8-bit grid: a cheap stand-in
    /// for natural images in tests and demos.
    pub fn synthetic(n: usize, shape: Shape, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Empty("synthetic dataset of size 0".into()));
        }
        let images = (0..n)
            .map(|i| synthetic_image(&mut SeededRng::new(seed, i as u64), shape))
            .collect();
        Dataset::new(images, None)
    }
}

fn synthetic_image(rng: &mut SeededRng, shape: Shape) -> Image {
    const WAVES: usize = 3;
    let mut data = vec![0.0; shape.len()];
    for ch in 0..shape.channels {
        let base = 1.6 * rng.uniform() - 0.8;
        let waves: Vec<[f64; 4]> = (0..WAVES)
            .map(|_| {
                [
                    0.6 * rng.standard_normal(),
                    std::f64::consts::TAU * rng.uniform() / shape.height as f64 * 2.0,
                    std::f64::consts::TAU * rng.uniform() / shape.width as f64 * 2.0,
                    std::f64::consts::TAU * rng.uniform(),
                ]
            })
            .collect();
        for r in 0..shape.height {
            for c in 0..shape.width {
                let v: f64 = base
                    + waves
                        .iter()
                        .map(|[a, fr, fc, ph]| a * (fr * r as f64 + fc * c as f64 + ph).cos())
                        .sum::<f64>();
                data[shape.index(r, c, ch)] = from_8bit(to_8bit(v.tanh()));
            }
        }
    }
    Image::new(shape, data).expect("length matches shape")
}

/// Loads a dataset from a directory of 8-bit images (sorted by file name; an
/// optional `labels.txt` holds one class id per line) or from a single
/// `DRTF` tensor file of shape `(N, H, W[, C])`.
///
/// With `shuffle_seed`, the subset is chosen by [`Dataset::subset`]; otherwise
/// `limit` keeps the first images.
pub fn load_dataset(
    path: impl AsRef<Path>,
    limit: Option<usize>,
    shuffle_seed: Option<u64>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let full = if meta.is_dir() {
        load_directory(path)?
    } else {
        let images = read_tensor(path)?.to_images()?;
        Dataset::new(images, None)?
    };
    let size = limit.unwrap_or(full.len());
    if size > full.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: limit {size} exceeds the {} available images",
            path.display(),
            full.len()
        )));
    }
    match shuffle_seed {
        Some(seed) => full.subset(size, seed),
        None if size == full.len() => Ok(full),
        None => full.truncated(size),
    }
}

fn load_directory(dir: &Path) -> Result<Dataset> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = p
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if is_image {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty(format!("{}: no image files", dir.display())));
    }
    let mut images = Vec::with_capacity(files.len());
    for f in &files {
        let img = Image::load(f)?;
        if let Some(first) = images.first() {
            let first: &Image = first;
            if first.shape() != img.shape() {
                return Err(Error::ShapeMismatch {
                    expected: first.shape().to_string(),
                    actual: format!("{} in {}", img.shape(), f.display()),
                });
            }
        }
        images.push(img);
    }
    let labels_path = dir.join("labels.txt");
    let labels = if labels_path.exists() {
        let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        Some(
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    l.trim().parse::<u32>().map_err(|e| {
                        Error::InvalidArgument(format!("{}: {l:?}: {e}", labels_path.display()))
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Dataset::new(images, labels)
}

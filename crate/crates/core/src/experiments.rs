//! Figure-level protocols built from the sampler and the metrics: the noise
//! hyperplane map, a local Lipschitz probe of the noise-to-image map, and the
//! dataset-size sweep.
//!
//! All noises passed in here are unscaled standard normal draws; the schedule's
//! initial-noise scaling is applied before sampling.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::denoiser::{NoisePredictor, OptimalDenoiser};
use crate::error::{Error, Result};
use crate::image::{from_8bit, Image, Shape};
use crate::metrics::{gl_score, nearest_train_mae, rp_score, SampleSet, SimilarityBackend};
use crate::rng::{noise_for_id, SeededRng};
use crate::sampler::{generate, generate_batch, SamplerConfig};

/// `eps(alpha, beta) = alpha (eps2 - eps1) + beta (eps3 - eps1) + eps1`.
pub fn hyperplane_noise(anchors: [&Image; 3], alpha: f64, beta: f64) -> Result<Image> {
    let [e1, e2, e3] = anchors;
    e1.check_same_shape(e2)?;
    e1.check_same_shape(e3)?;
    let data = e1
        .data()
        .iter()
        .zip(e2.data().iter().zip(e3.data()))
        .map(|(a, (b, c))| alpha * (b - a) + beta * (c - a) + a)
        .collect();
    Image::new(e1.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperplaneGrid {
    pub size: usize,
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
}

impl Default for HyperplaneGrid {
    fn default() -> Self {
        HyperplaneGrid {
            size: 100,
            alpha: (-0.1, 1.1),
            beta: (-0.1, 1.1),
        }
    }
}

impl HyperplaneGrid {
    pub fn with_size(mut self, size: usize) -> Self {
        self.size = size;
        self
    }

    fn axis(range: (f64, f64), size: usize, k: usize) -> f64 {
        if size == 1 {
            return range.0;
        }
        let u = k as f64 / (size - 1) as f64;
        range.0 + (range.1 - range.0) * u
    }

    /// `(alpha, beta)` of cell `(row, col)`; rows follow beta, columns alpha.
    pub fn point(&self, row: usize, col: usize) -> (f64, f64) {
        (
            Self::axis(self.alpha, self.size, col),
            Self::axis(self.beta, self.size, row),
        )
    }

    fn validate(&self) -> Result<()> {
        let increasing =
            |(lo, hi): (f64, f64)| lo.partial_cmp(&hi) == Some(std::cmp::Ordering::Less);
        if self.size == 0 || !increasing(self.alpha) || !increasing(self.beta) {
            return Err(Error::InvalidArgument(format!(
                "bad hyperplane grid {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub alpha: f64,
    pub beta: f64,
    /// 1, 2 or 3.
    pub class: u8,
    /// Similarity to the chosen anchor image.
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperplaneMap {
    pub grid: HyperplaneGrid,
    /// `size * size` cells, row-major.
    pub cells: Vec<Cell>,
    /// The explicitly evaluated probes at `(0,0)`, `(1,0)` and `(0,1)`.
    pub anchor_probes: [Cell; 3],
    pub anchor_images: [Image; 3],
}

impl HyperplaneMap {
    pub fn cell(&self, row: usize, col: usize) -> &Cell {
        &self.cells[row * self.grid.size + col]
    }

    /// Fraction of horizontally or vertically adjacent cell pairs that share a
    /// class or whose anchor similarities differ by less than 0.5.
    pub fn coherence(&self) -> f64 {
        let g = self.grid.size;
        let coherent =
            |a: &Cell, b: &Cell| a.class == b.class || (a.similarity - b.similarity).abs() < 0.5;
        let (mut ok, mut total) = (0usize, 0usize);
        for r in 0..g {
            for c in 0..g {
                let here = self.cell(r, c);
                for (nr, nc) in [(r, c + 1), (r + 1, c)] {
                    if nr < g && nc < g {
                        total += 1;
                        ok += coherent(here, self.cell(nr, nc)) as usize;
                    }
                }
            }
        }
        if total == 0 {
            1.0
        } else {
            ok as f64 / total as f64
        }
    }

    pub fn to_csv(&self) -> String {
        cells_csv(&self.cells)
    }

    pub fn anchors_csv(&self) -> String {
        cells_csv(&self.anchor_probes)
    }

    /// One byte per cell: class `k` occupies gray levels `85 (k - 1) ..= 85 (k - 1) + 84`,
    /// brighter for higher similarity.
    pub fn to_pgm_image(&self) -> Image {
        let g = self.grid.size;
        let data = self
            .cells
            .iter()
            .map(|c| {
                let level = (84.0 * c.similarity.clamp(0.0, 1.0)).round() as u8;
                from_8bit(85 * (c.class - 1) + level)
            })
            .collect();
        Image::new(Shape::new(g, g, 1).expect("non-empty grid"), data).expect("length matches")
    }
}

fn cells_csv(cells: &[Cell]) -> String {
    let mut out = String::from("alpha,beta,class,similarity\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{:.6},{:.6},{},{:.6}",
            c.alpha, c.beta, c.class, c.similarity
        );
    }
    out
}

fn classify(
    backend: &SimilarityBackend,
    anchors: &[Image; 3],
    x: &Image,
    alpha: f64,
    beta: f64,
) -> Result<Cell> {
    let mut best = (0u8, f64::NEG_INFINITY);
    for (k, a) in anchors.iter().enumerate() {
        let s = backend.similarity(a, x)?;
        // Strict comparison keeps ties on the lowest index.
        if s > best.1 {
            best = (k as u8 + 1, s);
        }
    }
    Ok(Cell {
        alpha,
        beta,
        class: best.0,
        similarity: best.1,
    })
}

/// Generates an image for every grid point of the plane through the three
/// anchor noises and classifies it by its most similar anchor image.
pub fn hyperplane_map(
    den: &OptimalDenoiser,
    cfg: &SamplerConfig,
    anchors: [&Image; 3],
    grid: HyperplaneGrid,
    backend: &SimilarityBackend,
) -> Result<HyperplaneMap> {
    grid.validate()?;
    let [e1, e2, e3] = anchors;
    if e1 == e2 || e1 == e3 || e2 == e3 {
        return Err(Error::InvalidArgument(
            "hyperplane anchors must be distinct".into(),
        ));
    }
    let sched = *den.schedule();
    let f = |alpha: f64, beta: f64| -> Result<Image> {
        let eps = hyperplane_noise(anchors, alpha, beta)?;
        generate(den, &sched.scale_initial_noise(&eps), cfg)
    };
    let anchor_images = [f(0.0, 0.0)?, f(1.0, 0.0)?, f(0.0, 1.0)?];
    let probe =
        |(alpha, beta): (f64, f64), x: &Image| classify(backend, &anchor_images, x, alpha, beta);
    let anchor_probes = [
        probe((0.0, 0.0), &anchor_images[0])?,
        probe((1.0, 0.0), &anchor_images[1])?,
        probe((0.0, 1.0), &anchor_images[2])?,
    ];
    let g = grid.size;
    let cells = (0..g * g)
        .into_par_iter()
        .map(|k| {
            let (alpha, beta) = grid.point(k / g, k % g);
            probe((alpha, beta), &f(alpha, beta)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HyperplaneMap {
        grid,
        cells,
        anchor_probes,
        anchor_images,
    })
}

/// Uniform draw from the ball of radius `radius` around `center`.
fn ball_point(center: &Image, radius: f64, rng: &mut SeededRng) -> Image {
    let d = center.len();
    let dir: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = radius * rng.uniform().powf(1.0 / d as f64);
    let data = center
        .data()
        .iter()
        .zip(&dir)
        .map(|(c, u)| c + r * u / norm)
        .collect();
    Image::new(center.shape(), data).expect("same shape")
}

fn l2_distance(a: &Image, b: &Image) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Largest `||f(a) - f(b)|| / ||a - b||` over `n` pairs drawn uniformly from
/// the ball around `eps`, where `f` is the noise-to-image map. Pairs are drawn
/// in sequence, so a larger `n` with the same generator extends the sample.
pub fn lipschitz_probe(
    den: &OptimalDenoiser,
    cfg: &SamplerConfig,
    eps: &Image,
    radius: f64,
    n: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    if radius <= 0.0 || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "radius {radius} must be positive"
        )));
    }
    if n < 1 {
        return Err(Error::InvalidArgument("need at least one pair".into()));
    }
    let pairs: Vec<(Image, Image)> = (0..n)
        .map(|_| (ball_point(eps, radius, rng), ball_point(eps, radius, rng)))
        .collect();
    let sched = *den.schedule();
    let ratios = pairs
        .par_iter()
        .map(|(a, b)| {
            let fa = generate(den, &sched.scale_initial_noise(a), cfg)?;
            let fb = generate(den, &sched.scale_initial_noise(b), cfg)?;
            Ok(l2_distance(&fa, &fb) / l2_distance(a, b))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ratios.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub dataset_size: usize,
    /// Smallest RP score over all pairs of sampler configurations.
    pub rp_score: f64,
    /// GL score of all samples pooled over configurations.
    pub gl_score: f64,
    pub mae_mean: f64,
    pub mae_max: f64,
    /// Fraction of samples within one pixel level of a training image.
    pub frac_mae_below_1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("dataset_size,rp_score,gl_score,mae_mean,mae_max,frac_mae_below_1\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.dataset_size, r.rp_score, r.gl_score, r.mae_mean, r.mae_max, r.frac_mae_below_1
            );
        }
        out
    }
}

/// For each size, samples `n_samples` images per sampler configuration from
/// the same noises (`noise_for_id(seed, 0..n_samples)`) using the optimal
/// denoiser of a seeded subset, then scores agreement across configurations
/// and closeness to the subset.
pub fn memorization_sweep(
    base: &Dataset,
    sizes: &[usize],
    sampler_cfgs: &[SamplerConfig],
    n_samples: usize,
    backend: &SimilarityBackend,
    schedule: crate::schedule::Schedule,
    seed: u64,
) -> Result<SweepResult> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep sizes must be non-empty and strictly increasing".into(),
        ));
    }
    if sampler_cfgs.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two sampler configurations".into(),
        ));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let shape = base.shape();
    let noises: Vec<Image> = (0..n_samples as u64)
        .map(|id| schedule.scale_initial_noise(&noise_for_id(seed, id, shape)))
        .collect();
    let noise_ids: Vec<u64> = (0..n_samples as u64).collect();
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let subset = base.subset(size, seed)?;
        let den = OptimalDenoiser::new(subset.clone(), schedule)?;
        let sets = sampler_cfgs
            .iter()
            .enumerate()
            .map(|(k, cfg)| {
                let images = generate_batch(&den, &noises, cfg)?;
                SampleSet::new(format!("cfg{k}"), images, noise_ids.clone(), None)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rp = f64::INFINITY;
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                rp = rp.min(rp_score(&sets[i], &sets[j], backend)?);
            }
        }
        let pooled_images: Vec<Image> =
            sets.iter().flat_map(|s| s.images.iter().cloned()).collect();
        let pooled = SampleSet::new(
            "pooled",
            pooled_images,
            (0..(n_samples * sets.len()) as u64).collect(),
            None,
        )?;
        let gl = gl_score(&pooled, &subset, backend)?;
        let maes = nearest_train_mae(&pooled.images, &subset)?;
        let n = maes.len() as f64;
        rows.push(SweepRow {
            dataset_size: size,
            rp_score: rp,
            gl_score: gl,
            mae_mean: maes.iter().sum::<f64>() / n,
            mae_max: maes.iter().copied().fold(0.0, f64::max),
            frac_mae_below_1: maes.iter().filter(|&&m| m < 1.0).count() as f64 / n,
        });
    }
    Ok(SweepResult { rows })
}

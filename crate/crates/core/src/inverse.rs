//! Deterministic posterior sampling for inpainting.
//!
//! Each solver step is followed by a gradient step on the data-consistency
//! loss `||z - A(x0_hat(x_i, t_i))||^2`, where `A` zeroes unobserved pixels.
//! With the closed-form denoiser the gradient is exact:
//! `-2 (d x0_hat / d x)^T A (z - A x0_hat)`, and the Jacobian is symmetric.

use std::path::Path;

use rayon::prelude::*;

use crate::denoiser::{NoisePredictor, OptimalDenoiser};
use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::rng::SeededRng;
use crate::sampler::{Grid, Integrator, Method, SamplerConfig};

/// Boolean `(H, W)` grid, broadcast over channels. `true` means observed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InpaintMask {
    height: usize,
    width: usize,
    observed: Vec<bool>,
}

impl InpaintMask {
    pub fn new(height: usize, width: usize, observed: Vec<bool>) -> Result<Self> {
        if observed.len() != height * width || observed.is_empty() {
            return Err(Error::InvalidShape(format!(
                "mask of {height}x{width} needs {} entries, got {}",
                height * width,
                observed.len()
            )));
        }
        if !observed.iter().any(|&o| o) {
            return Err(Error::InvalidArgument("mask observes no pixel".into()));
        }
        Ok(InpaintMask {
            height,
            width,
            observed,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        InpaintMask::new(height, width, vec![true; height * width]).expect("non-empty")
    }

    /// Observes only the centered `side x side` square.
    pub fn center_square(height: usize, width: usize, side: usize) -> Result<Self> {
        if side == 0 || side > height || side > width {
            return Err(Error::InvalidArgument(format!(
                "square of side {side} does not fit {height}x{width}"
            )));
        }
        let (r0, c0) = ((height - side) / 2, (width - side) / 2);
        let observed = (0..height * width)
            .map(|k| {
                let (r, c) = (k / width, k % width);
                (r0..r0 + side).contains(&r) && (c0..c0 + side).contains(&c)
            })
            .collect();
        InpaintMask::new(height, width, observed)
    }

    /// Hides the centered `side x side` square and observes everything else.
    pub fn center_hole(height: usize, width: usize, side: usize) -> Result<Self> {
        InpaintMask::center_square(height, width, side)?.complement()
    }

    /// Named presets scaled from a 32x32 reference: `easy` hides a 16x16
    /// center square (25% of the area), `hard` a 25x25 one (61%).
    pub fn preset(name: &str, height: usize, width: usize) -> Result<Self> {
        let side32 = match name {
            "easy" => 16,
            "hard" => 25,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown mask preset {other:?} (expected easy or hard)"
                )))
            }
        };
        let side = ((side32 * height.min(width)) as f64 / 32.0).round() as usize;
        InpaintMask::center_hole(height, width, side.max(1))
    }

    pub fn complement(&self) -> Result<Self> {
        InpaintMask::new(
            self.height,
            self.width,
            self.observed.iter().map(|o| !o).collect(),
        )
    }

    /// Loads a grayscale image where pixels above 127 are observed.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = Image::load(path.as_ref())?;
        let s = img.shape();
        let observed = img
            .to_8bit()
            .chunks(s.channels)
            .map(|px| px[0] > 127)
            .collect();
        InpaintMask::new(s.height, s.width, observed)
    }

    /// Observed pixels white, hidden pixels black.
    pub fn to_image(&self) -> Image {
        let shape = Shape::new(self.height, self.width, 1).expect("non-empty");
        let data = self
            .observed
            .iter()
            .map(|&o| if o { 1.0 } else { -1.0 })
            .collect();
        Image::new(shape, data).expect("length matches")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.observed[row * self.width + col]
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Fraction of hidden pixels.
    pub fn hidden_fraction(&self) -> f64 {
        1.0 - self.observed_count() as f64 / self.observed.len() as f64
    }

    fn check(&self, shape: Shape) -> Result<()> {
        if (shape.height, shape.width) != (self.height, self.width) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}xC", self.height, self.width),
                actual: shape.to_string(),
            });
        }
        Ok(())
    }

    /// Per-entry mask over an image of `channels` channels.
    fn entries(&self, channels: usize) -> impl Iterator<Item = bool> + '_ {
        self.observed
            .iter()
            .flat_map(move |&o| std::iter::repeat_n(o, channels))
    }

    /// `A(x)`: zeroes unobserved entries.
    pub fn apply(&self, x: &Image) -> Result<Image> {
        self.check(x.shape())?;
        let data = x
            .data()
            .iter()
            .zip(self.entries(x.shape().channels))
            .map(|(&v, o)| if o { v } else { 0.0 })
            .collect();
        Image::new(x.shape(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub z: Image,
    pub mask: InpaintMask,
    pub noise_level: f64,
}

/// Noise-free measurement `z = A(u)`.
pub fn apply_mask(u: &Image, mask: &InpaintMask) -> Result<Observation> {
    Ok(Observation {
        z: mask.apply(u)?,
        mask: mask.clone(),
        noise_level: 0.0,
    })
}

/// `z = A(u) + eta * n` with standard normal `n` on observed entries.
pub fn apply_mask_noisy(
    u: &Image,
    mask: &InpaintMask,
    noise_level: f64,
    rng: &mut SeededRng,
) -> Result<Observation> {
    if noise_level < 0.0 || !noise_level.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise level {noise_level} must be >= 0"
        )));
    }
    let mut z = mask.apply(u)?;
    let entries: Vec<bool> = mask.entries(u.shape().channels).collect();
    for (v, o) in z.data_mut().iter_mut().zip(entries) {
        if o {
            *v += noise_level * rng.standard_normal();
        }
    }
    Ok(Observation {
        z,
        mask: mask.clone(),
        noise_level,
    })
}

/// `A(z - x0_hat)` as a flat vector.
fn masked_residual(obs: &Observation, x0: &[f64]) -> Vec<f64> {
    obs.z
        .data()
        .iter()
        .zip(x0)
        .zip(obs.mask.entries(obs.z.shape().channels))
        .map(|((z, m), o)| if o { z - m } else { 0.0 })
        .collect()
}

/// The data-consistency loss `||z - A(x0_hat(x, t))||^2`.
pub fn data_consistency_loss(
    den: &OptimalDenoiser,
    x: &Image,
    t: f64,
    obs: &Observation,
) -> Result<f64> {
    obs.mask.check(x.shape())?;
    let x0 = den.x0_prediction(x, t)?;
    Ok(masked_residual(obs, x0.data()).iter().map(|r| r * r).sum())
}

/// Exact gradient of [`data_consistency_loss`] with respect to `x`.
pub fn grad_data_consistency(
    den: &OptimalDenoiser,
    x: &Image,
    t: f64,
    obs: &Observation,
) -> Result<Image> {
    obs.mask.check(x.shape())?;
    let x0 = den.x0_prediction(x, t)?;
    let r = masked_residual(obs, x0.data());
    let g = den.cov_vjp_flat(x.data(), t, &r)?;
    Image::new(x.shape(), g.into_iter().map(|v| -2.0 * v).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpsConfig {
    pub n_dps: usize,
    /// Step size after solver step `i` (`xi[0]` is the first, noisiest step).
    pub xi: Vec<f64>,
    pub method: Method,
    pub grid: Grid,
    /// Upper bound on denoiser evaluations, including the final denoise.
    pub nfe_budget: usize,
}

impl Default for DpsConfig {
    fn default() -> Self {
        DpsConfig::new(34)
    }
}

impl DpsConfig {
    pub const DEFAULT_NFE_BUDGET: usize = 100;

    pub fn new(n_dps: usize) -> Self {
        DpsConfig {
            n_dps,
            xi: vec![1.0; n_dps],
            method: Method::ExpInt(3),
            grid: Grid::Uniform,
            nfe_budget: Self::DEFAULT_NFE_BUDGET,
        }
    }

    pub fn with_constant_xi(mut self, xi: f64) -> Self {
        self.xi = vec![xi; self.n_dps];
        self
    }

    /// The unconditional sampler that the posterior sampler perturbs.
    pub fn sampler_config(&self, den: &OptimalDenoiser) -> SamplerConfig {
        SamplerConfig::generation(self.method, self.n_dps, den.schedule()).with_grid(self.grid)
    }

    /// Denoiser evaluations for one reconstruction.
    pub fn evaluations(&self) -> usize {
        self.n_dps * self.method.evaluations_per_step() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dps == 0 {
            return Err(Error::InvalidArgument("n_dps must be >= 1".into()));
        }
        if self.xi.len() != self.n_dps {
            return Err(Error::InvalidArgument(format!(
                "{} step sizes for {} steps",
                self.xi.len(),
                self.n_dps
            )));
        }
        if let Some(bad) = self.xi.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step size {bad} must be >= 0"
            )));
        }
        if self.evaluations() > self.nfe_budget {
            return Err(Error::InvalidArgument(format!(
                "{} steps of {} need {} evaluations, budget is {}",
                self.n_dps,
                self.method,
                self.evaluations(),
                self.nfe_budget
            )));
        }
        Ok(())
    }
}

/// Reconstructs `u` from `obs`, starting from the (already schedule-scaled)
/// noise `x_t`. Returns the final posterior-mean prediction.
pub fn dps_inpaint(
    den: &OptimalDenoiser,
    obs: &Observation,
    x_t: &Image,
    cfg: &DpsConfig,
) -> Result<Image> {
    cfg.validate()?;
    if x_t.shape() != den.shape() || obs.z.shape() != den.shape() {
        return Err(Error::ShapeMismatch {
            expected: den.shape().to_string(),
            actual: if x_t.shape() != den.shape() {
                x_t.shape()
            } else {
                obs.z.shape()
            }
            .to_string(),
        });
    }
    if !x_t.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let mut integ = Integrator::new(den, &cfg.sampler_config(den))?;
    let mut x = x_t.data().to_vec();
    for i in 0..integ.steps() {
        let pred = integ.predict(&x, i)?;
        let mut next = integ.step(i, &x, &pred)?;
        let xi = cfg.xi[i];
        if xi != 0.0 {
            let r = masked_residual(obs, &pred.x0);
            let g = den.cov_vjp_flat(&x, integ.times()[i], &r)?;
            for (n, gj) in next.iter_mut().zip(g) {
                *n += 2.0 * xi * gj;
            }
        }
        x = next;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState {
                step: i,
                t: integ.times()[i + 1],
            });
        }
    }
    let last = integ.steps();
    let x0 = integ.predict(&x, last)?.x0;
    Image::new(x_t.shape(), x0)
}

/// Reconstructs many `(observation, noise)` pairs in parallel, in input order.
pub fn dps_inpaint_batch(
    den: &OptimalDenoiser,
    jobs: &[(Observation, Image)],
    cfg: &DpsConfig,
) -> Result<Vec<Image>> {
    jobs.par_iter()
        .map(|(obs, x_t)| dps_inpaint(den, obs, x_t, cfg))
        .collect()
}

/// Mean absolute 8-bit difference over observed entries only.
pub fn observed_mae(a: &Image, b: &Image, mask: &InpaintMask) -> Result<f64> {
    a.check_same_shape(b)?;
    mask.check(a.shape())?;
    let (a8, b8) = (a.to_8bit(), b.to_8bit());
    let (mut total, mut n) = (0u64, 0u64);
    for ((p, q), o) in a8.iter().zip(&b8).zip(mask.entries(a.shape().channels)) {
        if o {
            total += (*p as i32 - *q as i32).unsigned_abs() as u64;
            n += 1;
        }
    }
    Ok(total as f64 / n as f64)
}

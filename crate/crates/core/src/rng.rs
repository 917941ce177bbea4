//! Deterministic, stream-splittable randomness.
//!
//! Every random draw in the crate goes through [`SeededRng`]. The generator is
//! ChaCha12 keyed from the 64-bit seed (`seed_from_u64`) with the stream id
//! written to the ChaCha stream word, so `(seed, stream)` addresses a fixed,
//! platform-independent output sequence. Uniforms take the top 53 bits of a
//! 64-bit word; normals use the Box–Muller transform and are produced in
//! pairs (cos branch first, then sin branch).

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::image::{Image, Shape};

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha12Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng {
            seed,
            stream,
            inner,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on a different stream of the same seed.
    pub fn fork(&self, stream: u64) -> SeededRng {
        SeededRng::new(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`.
    fn uniform_open_low(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open_low();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform index in `0..n` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            let low = m as u64;
            if low >= n.wrapping_neg() % n {
                return (m >> 64) as u64;
            }
        }
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            p.swap(i, j);
        }
        p
    }
}

/// Draws an image of i.i.d. standard normal entries.
pub fn sample_standard_normal(rng: &mut SeededRng, shape: Shape) -> Image {
    let data = (0..shape.len()).map(|_| rng.standard_normal()).collect();
    Image::new(shape, data).expect("length matches shape")
}

/// The initial noise for sample `noise_id`: stream `noise_id` of `seed`.
pub fn noise_for_id(seed: u64, noise_id: u64, shape: Shape) -> Image {
    sample_standard_normal(&mut SeededRng::new(seed, noise_id), shape)
}

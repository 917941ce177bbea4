//! The closed-form optimal noise predictor for an empirical delta mixture.
//!
//! For training points `y_1..y_N` and kernel `(s_t, sigma_t)`, the minimizer
//! of the denoising loss is
//!
//! ```text
//! eps*(x, t) = (x - s_t * x0_hat(x, t)) / (s_t sigma_t)
//! x0_hat     = Σ_i w_i y_i,   w = softmax_i( -|x - s_t y_i|^2 / (2 s_t^2 sigma_t^2) )
//! ```
//!
//! The weights are the mixture responsibilities of `p_t(x)`. They are always
//! formed in log space with the maximum subtracted: the raw Gaussian densities
//! underflow to zero for every component once `sigma_t` is small.
//!
//! The Jacobian of the posterior mean is the weighted covariance of the
//! training points scaled by `1 / (s_t sigma_t^2)`; it is symmetric, so the
//! same routine gives Jacobian-vector and vector-Jacobian products.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::schedule::Schedule;

/// Noise and clean-image predictions at one `(x, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub eps: Vec<f64>,
    pub x0: Vec<f64>,
}

/// Anything the probability-flow samplers can integrate.
///
/// The optimal denoiser is the only production implementation; tests plug in
/// synthetic fields through this trait.
pub trait NoisePredictor: Sync {
    fn schedule(&self) -> &Schedule;

    fn shape(&self) -> Shape;

    /// Predictions for a flat state `x` at time `t` (within the clip bounds).
    fn predict(&self, x: &[f64], t: f64) -> Result<Prediction>;
}

/// Mixture responsibilities at one `(x, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    pub weights: Vec<f64>,
    pub x0_mean: Image,
    /// `ln Σ_i exp(a_i)` for the logits `a_i` above.
    pub log_norm: f64,
}

/// The optimal denoiser over a fixed dataset and schedule.
#[derive(Debug, Clone)]
pub struct OptimalDenoiser {
    dataset: Dataset,
    schedule: Schedule,
    /// Row-major `N x d` copy of the dataset.
    points: Vec<f64>,
}

struct Posterior {
    weights: Vec<f64>,
    x0: Vec<f64>,
    log_norm: f64,
    s: f64,
    sigma: f64,
}

impl OptimalDenoiser {
    pub fn new(dataset: Dataset, schedule: Schedule) -> Result<Self> {
        schedule.validate()?;
        let points = dataset
            .images()
            .iter()
            .flat_map(|img| img.data().iter().copied())
            .collect();
        Ok(OptimalDenoiser {
            dataset,
            schedule,
            points,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    fn dim(&self) -> usize {
        self.dataset.shape().len()
    }

    fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.points[i * d..(i + 1) * d]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values {}", self.dim(), self.dataset.shape()),
                actual: format!("{} values", x.len()),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    fn check_image(&self, x: &Image) -> Result<()> {
        if x.shape() != self.dataset.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.dataset.shape().to_string(),
                actual: x.shape().to_string(),
            });
        }
        Ok(())
    }

    fn posterior(&self, x: &[f64], t: f64) -> Result<Posterior> {
        self.check_input(x)?;
        let c = self.schedule.eval(t)?;
        let (s, sigma) = (c.s, c.sigma);
        let inv_two_var = 1.0 / (2.0 * s * s * sigma * sigma);
        let n = self.dataset.len();
        let mut logits = Vec::with_capacity(n);
        for i in 0..n {
            let dist_sq: f64 = x
                .iter()
                .zip(self.point(i))
                .map(|(xj, yj)| {
                    let r = xj - s * yj;
                    r * r
                })
                .sum();
            logits.push(-dist_sq * inv_two_var);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = logits.iter().map(|a| (a - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        let mut x0 = vec![0.0; self.dim()];
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (acc, yj) in x0.iter_mut().zip(self.point(i)) {
                *acc += w * yj;
            }
        }
        Ok(Posterior {
            weights,
            x0,
            log_norm: max + total.ln(),
            s,
            sigma,
        })
    }

    /// Mixture responsibilities and posterior mean.
    pub fn posterior_weights(&self, x: &Image, t: f64) -> Result<PosteriorStats> {
        self.check_image(x)?;
        let p = self.posterior(x.data(), t)?;
        Ok(PosteriorStats {
            weights: p.weights,
            x0_mean: Image::new(x.shape(), p.x0)?,
            log_norm: p.log_norm,
        })
    }

    /// `ln p_t(x)` of the perturbed mixture `(1/N) Σ N(x; s y_i, s^2 sigma^2 I)`.
    pub fn log_density(&self, x: &Image, t: f64) -> Result<f64> {
        self.check_image(x)?;
        let p = self.posterior(x.data(), t)?;
        let d = self.dim() as f64;
        let var = p.s * p.s * p.sigma * p.sigma;
        Ok(p.log_norm
            - (self.dataset.len() as f64).ln()
            - 0.5 * d * (std::f64::consts::TAU * var).ln())
    }

    pub fn epsilon_star(&self, x: &Image, t: f64) -> Result<Image> {
        self.check_image(x)?;
        let pred = self.predict(x.data(), t)?;
        Image::new(x.shape(), pred.eps)
    }

    /// Posterior mean `Σ w_i y_i` (the Tweedie estimate of the clean image).
    pub fn x0_prediction(&self, x: &Image, t: f64) -> Result<Image> {
        self.check_image(x)?;
        let p = self.posterior(x.data(), t)?;
        Image::new(x.shape(), p.x0)
    }

    /// Product of the posterior-mean Jacobian with `v`:
    /// `(1 / (s sigma^2)) Σ_i w_i (y_i - x0_hat) <y_i - x0_hat, v>`.
    pub fn posterior_cov_vjp(&self, x: &Image, t: f64, v: &Image) -> Result<Image> {
        self.check_image(x)?;
        self.check_image(v)?;
        let out = self.cov_vjp_flat(x.data(), t, v.data())?;
        Image::new(x.shape(), out)
    }

    pub(crate) fn cov_vjp_flat(&self, x: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
        let p = self.posterior(x, t)?;
        let scale = 1.0 / (p.s * p.sigma * p.sigma);
        let mut out = vec![0.0; self.dim()];
        for (i, &w) in p.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let y = self.point(i);
            let proj: f64 = y
                .iter()
                .zip(&p.x0)
                .zip(v)
                .map(|((yj, mj), vj)| (yj - mj) * vj)
                .sum();
            let coef = w * proj * scale;
            for ((o, yj), mj) in out.iter_mut().zip(y).zip(&p.x0) {
                *o += coef * (yj - mj);
            }
        }
        Ok(out)
    }
}

impl NoisePredictor for OptimalDenoiser {
    fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn shape(&self) -> Shape {
        self.dataset.shape()
    }

    fn predict(&self, x: &[f64], t: f64) -> Result<Prediction> {
        let p = self.posterior(x, t)?;
        let inv = 1.0 / (p.s * p.sigma);
        let eps = x
            .iter()
            .zip(&p.x0)
            .map(|(xj, mj)| (xj - p.s * mj) * inv)
            .collect();
        Ok(Prediction { eps, x0: p.x0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_standard_normal, SeededRng};
    use proptest::prelude::*;

    fn random_dataset(n: usize, shape: Shape, seed: u64) -> Dataset {
        let mut rng = SeededRng::new(seed, 99);
        let images = (0..n)
            .map(|_| {
                let data = (0..shape.len())
                    .map(|_| 2.0 * rng.uniform() - 1.0)
                    .collect();
                Image::new(shape, data).unwrap()
            })
            .collect();
        Dataset::new(images, None).unwrap()
    }

    fn shape48() -> Shape {
        Shape::new(4, 4, 3).unwrap()
    }

    /// Evaluates each Gaussian density directly (no log-space tricks).
    fn direct_weights(ds: &Dataset, x: &Image, s: f64, sigma: f64) -> Vec<f64> {
        let var = s * s * sigma * sigma;
        let d = x.len() as f64;
        let dens: Vec<f64> = ds
            .images()
            .iter()
            .map(|y| {
                let q: f64 = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(a, b)| (a - s * b).powi(2))
                    .sum();
                (std::f64::consts::TAU * var).powf(-d / 2.0) * (-q / (2.0 * var)).exp()
            })
            .collect();
        let total: f64 = dens.iter().sum();
        dens.iter().map(|p| p / total).collect()
    }

    fn probe(den: &OptimalDenoiser, t: f64, stream: u64) -> Image {
        // A noisy version of a training point, so weights are non-degenerate.
        let c = den.schedule().eval(t).unwrap();
        let mut rng = SeededRng::new(5, stream);
        let k = rng.below(den.dataset().len() as u64) as usize;
        let noise = sample_standard_normal(&mut rng, den.shape());
        let data = den
            .dataset()
            .image(k)
            .data()
            .iter()
            .zip(noise.data())
            .map(|(y, e)| c.s * y + c.s * c.sigma * e)
            .collect();
        Image::new(den.shape(), data).unwrap()
    }

    #[test]
    fn single_point_weights_and_predictions() {
        let ds = random_dataset(1, shape48(), 1);
        let den = OptimalDenoiser::new(ds.clone(), Schedule::vp()).unwrap();
        for (t, stream) in [(0.01, 0), (0.5, 1), (1.0, 2)] {
            let x = probe(&den, t, stream);
            let post = den.posterior_weights(&x, t).unwrap();
            assert_eq!(post.weights, vec![1.0]);
            assert_eq!(den.x0_prediction(&x, t).unwrap(), *ds.image(0));
            let c = den.schedule().eval(t).unwrap();
            let eps = den.epsilon_star(&x, t).unwrap();
            for ((e, xi), yi) in eps.data().iter().zip(x.data()).zip(ds.image(0).data()) {
                assert!((e - (xi - c.s * yi) / (c.s * c.sigma)).abs() < 1e-12);
            }
            let v = probe(&den, t, stream + 10);
            assert!(den
                .posterior_cov_vjp(&x, t, &v)
                .unwrap()
                .data()
                .iter()
                .all(|&u| u == 0.0));
        }
    }

    #[test]
    fn symmetric_pair_splits_evenly() {
        let ds = random_dataset(2, shape48(), 2);
        let den = OptimalDenoiser::new(ds.clone(), Schedule::vp()).unwrap();
        let t = 0.3;
        let c = den.schedule().eval(t).unwrap();
        let data = ds
            .image(0)
            .data()
            .iter()
            .zip(ds.image(1).data())
            .map(|(a, b)| c.s * (a + b) / 2.0)
            .collect();
        let x = Image::new(den.shape(), data).unwrap();
        let w = den.posterior_weights(&x, t).unwrap().weights;
        assert!(
            (w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12,
            "{w:?}"
        );
    }

    #[test]
    fn weights_match_direct_densities() {
        let ds = random_dataset(16, shape48(), 3);
        let den = OptimalDenoiser::new(ds.clone(), Schedule::vp()).unwrap();
        for (k, t) in [0.3, 0.5, 0.7, 1.0].into_iter().enumerate() {
            let x = probe(&den, t, k as u64);
            let c = den.schedule().eval(t).unwrap();
            let oracle = direct_weights(&ds, &x, c.s, c.sigma);
            let got = den.posterior_weights(&x, t).unwrap();
            for (a, b) in got.weights.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "t={t}: {a} vs {b}");
            }
            // log_norm is the exact log-sum-exp of the logits
            let lse = ds
                .images()
                .iter()
                .map(|y| {
                    let q: f64 = x
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(a, b)| (a - c.s * b).powi(2))
                        .sum();
                    (-q / (2.0 * c.s * c.s * c.sigma * c.sigma)).exp()
                })
                .sum::<f64>()
                .ln();
            assert!((got.log_norm - lse).abs() < 1e-10);
        }
    }

    #[test]
    fn epsilon_matches_naive_formula() {
        let ds = random_dataset(16, shape48(), 4);
        let den = OptimalDenoiser::new(ds.clone(), Schedule::sub_vp()).unwrap();
        for k in 0..10 {
            let t = 0.2 + 0.08 * k as f64;
            let x = probe(&den, t, 100 + k);
            let c = den.schedule().eval(t).unwrap();
            let w = direct_weights(&ds, &x, c.s, c.sigma);
            let eps = den.epsilon_star(&x, t).unwrap();
            for j in 0..x.len() {
                let num: f64 = w
                    .iter()
                    .zip(ds.images())
                    .map(|(wi, y)| wi * y.data()[j])
                    .sum();
                let naive = (x.data()[j] - c.s * num) / (c.s * c.sigma);
                assert!((eps.data()[j] - naive).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dominant_component_gives_zero_noise() {
        let ds = random_dataset(8, shape48(), 5);
        let den = OptimalDenoiser::new(ds.clone(), Schedule::vp()).unwrap();
        let t = 0.002;
        let c = den.schedule().eval(t).unwrap();
        let x = ds.image(3).scaled(c.s);
        let post = den.posterior_weights(&x, t).unwrap();
        assert!(post.weights[3] > 1.0 - 1e-9);
        let eps = den.epsilon_star(&x, t).unwrap();
        assert!(eps.data().iter().all(|e| e.abs() < 1e-6));
    }

    #[test]
    fn two_point_covariance_identity() {
        let ds = random_dataset(2, shape48(), 6);
        let den = OptimalDenoiser::new(ds.clone(), Schedule::vp()).unwrap();
        for (k, t) in [0.4, 0.6, 0.9].into_iter().enumerate() {
            let x = probe(&den, t, 200 + k as u64);
            let v = probe(&den, t, 300 + k as u64);
            let c = den.schedule().eval(t).unwrap();
            let w = den.posterior_weights(&x, t).unwrap().weights;
            let diff: Vec<f64> = ds
                .image(0)
                .data()
                .iter()
                .zip(ds.image(1).data())
                .map(|(a, b)| a - b)
                .collect();
            let proj: f64 = diff.iter().zip(v.data()).map(|(a, b)| a * b).sum();
            let got = den.posterior_cov_vjp(&x, t, &v).unwrap();
            for (g, dj) in got.data().iter().zip(&diff) {
                let want = w[0] * w[1] * proj * dj / (c.s * c.sigma * c.sigma);
                assert!((g - want).abs() < 1e-12, "{g} vs {want}");
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let ds = random_dataset(16, shape48(), 7);
        let den = OptimalDenoiser::new(ds, Schedule::vp()).unwrap();
        let h = 1e-4;
        for k in 0..8 {
            let t = 0.45 + 0.05 * k as f64;
            let x = probe(&den, t, 400 + k);
            let v = sample_standard_normal(&mut SeededRng::new(8, k), den.shape());
            let vjp = den.posterior_cov_vjp(&x, t, &v).unwrap();
            let shift = |sign: f64| {
                let d = x
                    .data()
                    .iter()
                    .zip(v.data())
                    .map(|(a, b)| a + sign * h * b)
                    .collect();
                den.x0_prediction(&Image::new(x.shape(), d).unwrap(), t)
                    .unwrap()
            };
            let (p, m) = (shift(1.0), shift(-1.0));
            let fd: Vec<f64> = p
                .data()
                .iter()
                .zip(m.data())
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            let num: f64 = fd
                .iter()
                .zip(vjp.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let den_norm: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(den_norm > 0.0);
            assert!(num / den_norm < 1e-4, "t={t}: rel {}", num / den_norm);
        }
    }

    #[test]
    fn survives_tiny_sigma_and_huge_inputs() {
        let ds = random_dataset(16, shape48(), 9);
        let mut sched = Schedule::ve();
        sched.sigma_min = 1e-4;
        let den = OptimalDenoiser::new(ds, sched).unwrap();
        let x = sample_standard_normal(&mut SeededRng::new(1, 1), den.shape()).scaled(1e3 / 7.0);
        for t in [sched.t_min, 0.5] {
            let post = den.posterior_weights(&x, t).unwrap();
            assert!(post.weights.iter().all(|w| w.is_finite() && *w >= 0.0));
            assert!((post.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(den.epsilon_star(&x, t).unwrap().is_finite());
            assert!(post.log_norm.is_finite());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let den = OptimalDenoiser::new(random_dataset(2, shape48(), 1), Schedule::vp()).unwrap();
        let wrong = Image::zeros(Shape::new(2, 2, 1).unwrap());
        assert!(matches!(
            den.epsilon_star(&wrong, 0.5),
            Err(Error::ShapeMismatch { .. })
        ));
        let nan = Image::filled(den.shape(), f64::NAN);
        assert!(matches!(
            den.x0_prediction(&nan, 0.5),
            Err(Error::NonFiniteInput)
        ));
        let ok = Image::zeros(den.shape());
        assert!(matches!(
            den.epsilon_star(&ok, 0.0),
            Err(Error::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn log_density_of_single_point_is_gaussian() {
        let ds = random_dataset(1, shape48(), 2);
        let den = OptimalDenoiser::new(ds.clone(), Schedule::vp()).unwrap();
        let t = 0.4;
        let c = den.schedule().eval(t).unwrap();
        let x = probe(&den, t, 3);
        let var = c.s * c.s * c.sigma * c.sigma;
        let q: f64 = x
            .data()
            .iter()
            .zip(ds.image(0).data())
            .map(|(a, b)| (a - c.s * b).powi(2))
            .sum();
        let want = -q / (2.0 * var) - 24.0 * (std::f64::consts::TAU * var).ln();
        assert!((den.log_density(&x, t).unwrap() - want).abs() < 1e-9);
    }

    fn fixture() -> OptimalDenoiser {
        OptimalDenoiser::new(random_dataset(16, shape48(), 11), Schedule::vp()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn tweedie_identity_and_hull(tf in 0.0f64..1.0, stream in 0u64..10_000) {
            let den = fixture();
            let t = den.schedule().t_min + tf * (1.0 - den.schedule().t_min);
            let x = probe(&den, t, stream);
            let c = den.schedule().eval(t).unwrap();
            let x0 = den.x0_prediction(&x, t).unwrap();
            let eps = den.epsilon_star(&x, t).unwrap();
            for j in 0..x.len() {
                let r = x.data()[j] - c.s * x0.data()[j] - c.s * c.sigma * eps.data()[j];
                prop_assert!(r.abs() < 1e-9);
                let (lo, hi) = den.dataset().images().iter().map(|y| y.data()[j])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
                prop_assert!(x0.data()[j] >= lo - 1e-12 && x0.data()[j] <= hi + 1e-12);
            }
            let w = den.posterior_weights(&x, t).unwrap().weights;
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn scale_consistency(tf in 0.0f64..1.0, stream in 0u64..10_000) {
            // eps*(x, t) equals the unit-scale problem evaluated at x / s_t.
            let den = fixture();
            let t = den.schedule().t_min + tf * (1.0 - den.schedule().t_min);
            let c = den.schedule().eval(t).unwrap();
            let x = probe(&den, t, stream);
            let eps = den.epsilon_star(&x, t).unwrap();
            let u = x.scaled(1.0 / c.s);
            let logits: Vec<f64> = den.dataset().images().iter().map(|y| {
                -u.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                    / (2.0 * c.sigma * c.sigma)
            }).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|a| (a - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..u.len() {
                let mean: f64 = w.iter().zip(den.dataset().images()).map(|(wi, y)| wi * y.data()[j]).sum::<f64>() / z;
                let e = (u.data()[j] - mean) / c.sigma;
                prop_assert!((e - eps.data()[j]).abs() < 1e-8 * (1.0 + e.abs()));
            }
        }

        #[test]
        fn vjp_is_linear_and_symmetric(tf in 0.3f64..1.0, stream in 0u64..10_000, a in -2.0f64..2.0) {
            let den = fixture();
            let t = tf;
            let x = probe(&den, t, stream);
            let u = sample_standard_normal(&mut SeededRng::new(stream, 1), den.shape());
            let v = sample_standard_normal(&mut SeededRng::new(stream, 2), den.shape());
            let ju = den.posterior_cov_vjp(&x, t, &u).unwrap();
            let jv = den.posterior_cov_vjp(&x, t, &v).unwrap();
            let dot = |p: &Image, q: &Image| p.data().iter().zip(q.data()).map(|(a, b)| a * b).sum::<f64>();
            let scale = 1.0 + dot(&u, &jv).abs();
            prop_assert!((dot(&u, &jv) - dot(&v, &ju)).abs() < 1e-10 * scale);
            let comb = Image::new(u.shape(), u.data().iter().zip(v.data()).map(|(p, q)| a * p + q).collect()).unwrap();
            let jc = den.posterior_cov_vjp(&x, t, &comb).unwrap();
            for j in 0..u.len() {
                let want = a * ju.data()[j] + jv.data()[j];
                prop_assert!((jc.data()[j] - want).abs() < 1e-9 * (1.0 + want.abs()));
            }
        }
    }
}

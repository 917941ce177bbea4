//! Perturbation kernels `p_t(x_t | x_0) = N(s_t x_0, s_t^2 sigma_t^2 I)`.
//!
//! The forward SDE `dx = f(t) x dt + g(t) dw` and the kernel parameters are
//! tied by
//!
//! ```text
//! s_t     = exp( ∫_0^t f )
//! sigma_t = sqrt( sigma_0^2 + ∫_0^t g^2 / s^2 )
//! ```
//!
//! with `sigma_0 = 0` for VP/sub-VP and `sigma_0 = sigma_min` for VE. With the
//! linear rate `beta(t) = beta_min + t (beta_max - beta_min)` and its integral
//! `B(t)`:
//!
//! | kind   | `s_t`        | `sigma_t`                         | `f(t)`     | `g^2(t)`                         |
//! |--------|--------------|-----------------------------------|------------|----------------------------------|
//! | VP     | `exp(-B/2)`  | `sqrt(exp(B) - 1)`                | `-beta/2`  | `beta`                           |
//! | sub-VP | `exp(-B/2)`  | `2 sinh(B/2)` (`s sigma = 1 - e^-B`) | `-beta/2` | `beta (1 - exp(-2B))`         |
//! | VE     | `1`          | `sigma_min (sigma_max/sigma_min)^t` | `0`      | `2 ln(sigma_max/sigma_min) sigma^2` |

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Vp,
    Ve,
    SubVp,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Vp => "vp",
            ScheduleKind::Ve => "ve",
            ScheduleKind::SubVp => "subvp",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vp" => Ok(ScheduleKind::Vp),
            "ve" => Ok(ScheduleKind::Ve),
            "subvp" | "sub-vp" | "sub_vp" => Ok(ScheduleKind::SubVp),
            other => Err(Error::InvalidArgument(format!(
                "unknown schedule kind {other:?} (expected vp, ve or subvp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

/// Kernel and SDE coefficients at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSample {
    pub t: f64,
    pub s: f64,
    pub sigma: f64,
    pub f: f64,
    pub g: f64,
    /// `g^2`, kept separately to avoid a square-root round trip.
    pub g_sq: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::vp()
    }
}

impl Schedule {
    pub const DEFAULT_BETA_MIN: f64 = 0.1;
    pub const DEFAULT_BETA_MAX: f64 = 20.0;
    pub const DEFAULT_SIGMA_MIN: f64 = 0.01;
    pub const DEFAULT_SIGMA_MAX: f64 = 50.0;
    pub const DEFAULT_T_MIN: f64 = 1e-3;
    pub const DEFAULT_T_MAX: f64 = 1.0;

    pub fn new(kind: ScheduleKind) -> Self {
        Schedule {
            kind,
            beta_min: Self::DEFAULT_BETA_MIN,
            beta_max: Self::DEFAULT_BETA_MAX,
            sigma_min: Self::DEFAULT_SIGMA_MIN,
            sigma_max: Self::DEFAULT_SIGMA_MAX,
            t_min: Self::DEFAULT_T_MIN,
            t_max: Self::DEFAULT_T_MAX,
        }
    }

    pub fn vp() -> Self {
        Schedule::new(ScheduleKind::Vp)
    }

    pub fn ve() -> Self {
        Schedule::new(ScheduleKind::Ve)
    }

    pub fn sub_vp() -> Self {
        Schedule::new(ScheduleKind::SubVp)
    }

    pub fn with_time_bounds(mut self, t_min: f64, t_max: f64) -> Self {
        self.t_min = t_min;
        self.t_max = t_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max <= 1.0) {
            return bad(format!(
                "need 0 < t_min < t_max <= 1, got t_min={}, t_max={}",
                self.t_min, self.t_max
            ));
        }
        match self.kind {
            ScheduleKind::Vp | ScheduleKind::SubVp => {
                if !(self.beta_min >= 0.0 && self.beta_max >= self.beta_min && self.beta_max > 0.0)
                {
                    return bad(format!(
                        "need beta_max >= beta_min >= 0 and beta_max > 0, got {} and {}",
                        self.beta_min, self.beta_max
                    ));
                }
            }
            ScheduleKind::Ve => {
                if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
                    return bad(format!(
                        "need sigma_max > sigma_min > 0, got {} and {}",
                        self.sigma_min, self.sigma_max
                    ));
                }
            }
        }
        Ok(())
    }

    fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `B(t) = ∫_0^t beta`.
    fn beta_integral(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    fn log_sigma_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    /// Kernel coefficients at `t`, rejecting times outside `[t_min, t_max]`.
    pub fn eval(&self, t: f64) -> Result<ScheduleSample> {
        if !(t >= self.t_min && t <= self.t_max) {
            return Err(Error::TimeOutOfRange {
                t,
                lo: self.t_min,
                hi: self.t_max,
            });
        }
        Ok(self.eval_unclipped(t))
    }

    /// Kernel coefficients at any `t` in `[0, 1]`, ignoring the clip bounds.
    pub fn eval_unclipped(&self, t: f64) -> ScheduleSample {
        let (s, sigma, f, g_sq) = match self.kind {
            ScheduleKind::Vp => {
                let b = self.beta_integral(t);
                let beta = self.beta(t);
                ((-0.5 * b).exp(), b.exp_m1().sqrt(), -0.5 * beta, beta)
            }
            ScheduleKind::SubVp => {
                let b = self.beta_integral(t);
                let beta = self.beta(t);
                (
                    (-0.5 * b).exp(),
                    2.0 * (0.5 * b).sinh(),
                    -0.5 * beta,
                    -beta * (-2.0 * b).exp_m1(),
                )
            }
            ScheduleKind::Ve => {
                let sigma = self.sigma_min * (t * self.log_sigma_ratio()).exp();
                (
                    1.0,
                    sigma,
                    0.0,
                    2.0 * self.log_sigma_ratio() * sigma * sigma,
                )
            }
        };
        ScheduleSample {
            t,
            s,
            sigma,
            f,
            g: g_sq.sqrt(),
            g_sq,
        }
    }

    /// Half log signal-to-noise ratio `lambda = ln(s / (s sigma)) = -ln sigma`.
    pub fn lambda(&self, t: f64) -> f64 {
        -self.eval_unclipped(t).sigma.ln()
    }

    /// Inverse of `t -> sigma_t` (all three profiles are strictly increasing).
    pub fn t_from_sigma(&self, sigma: f64) -> f64 {
        let from_b = |b: f64| {
            let d = self.beta_max - self.beta_min;
            2.0 * b / (self.beta_min + (self.beta_min * self.beta_min + 2.0 * d * b).sqrt())
        };
        match self.kind {
            ScheduleKind::Vp => from_b((sigma * sigma).ln_1p()),
            ScheduleKind::SubVp => from_b(2.0 * (0.5 * sigma).asinh()),
            ScheduleKind::Ve => (sigma / self.sigma_min).ln() / self.log_sigma_ratio(),
        }
    }

    /// Variance floor `sigma_0` at `t = 0`.
    fn sigma_at_zero(&self) -> f64 {
        match self.kind {
            ScheduleKind::Ve => self.sigma_min,
            _ => 0.0,
        }
    }

    /// Maps standard-normal noise into this kernel's terminal noise space:
    /// unchanged for VP/sub-VP, scaled by `sigma_max` for VE.
    pub fn scale_initial_noise(&self, eps: &Image) -> Image {
        match self.kind {
            ScheduleKind::Ve => eps.scaled(self.sigma_max),
            _ => eps.clone(),
        }
    }

    /// Largest deviation between the closed forms and quadrature of the
    /// defining integrals over `n_points` uniformly spaced times in
    /// `[t_min, t_max]`.
    pub fn check_consistency(&self, n_points: usize) -> Result<f64> {
        if n_points < 2 {
            return Err(Error::InvalidArgument(format!(
                "consistency check needs at least 2 points, got {n_points}"
            )));
        }
        let sigma0 = self.sigma_at_zero();
        let mut worst: f64 = 0.0;
        for k in 0..n_points {
            let t = self.t_min + (self.t_max - self.t_min) * k as f64 / (n_points - 1) as f64;
            let closed = self.eval_unclipped(t);
            let int_f = quadrature::integrate(|u| self.eval_unclipped(u).f, 0.0, t, 1e-14).integral;
            let int_g = quadrature::integrate(
                |u| {
                    let c = self.eval_unclipped(u);
                    c.g_sq / (c.s * c.s)
                },
                0.0,
                t,
                1e-12,
            )
            .integral;
            let s_quad = int_f.exp();
            let sigma_quad = (sigma0 * sigma0 + int_g).sqrt();
            worst = worst
                .max((closed.s - s_quad).abs())
                .max((closed.sigma - sigma_quad).abs());
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KINDS: [ScheduleKind; 3] = [ScheduleKind::Vp, ScheduleKind::Ve, ScheduleKind::SubVp];

    #[test]
    fn vp_terminal_scale() {
        // ∫_0^1 beta = 0.1 + 19.9 / 2 = 10.05 for the default linear profile.
        let c = Schedule::vp().eval(1.0).unwrap();
        assert!((c.s - (-5.025f64).exp()).abs() < 1e-15);
        assert!((c.s - 6.5716e-3).abs() < 1e-7);
        let quad = quadrature::integrate(|t| 0.1 + 19.9 * t, 0.0, 1.0, 1e-14).integral;
        assert!((quad - 10.05).abs() < 1e-12);
    }

    #[test]
    fn kernel_reduces_to_identity_near_zero() {
        for sched in [Schedule::vp(), Schedule::sub_vp()] {
            let c = sched.eval_unclipped(1e-9);
            assert!((c.s - 1.0).abs() < 1e-8);
            assert!(c.sigma < 1e-4);
        }
        assert_eq!(Schedule::ve().eval_unclipped(0.0).sigma, 0.01);
    }

    #[test]
    fn ve_has_unit_scale_and_hits_sigma_max() {
        let sched = Schedule::ve();
        for t in [1e-3, 0.3, 1.0] {
            assert_eq!(sched.eval(t).unwrap().s, 1.0);
        }
        assert!((sched.eval(1.0).unwrap().sigma - 50.0).abs() < 1e-12);
    }

    #[test]
    fn eval_rejects_out_of_range() {
        let sched = Schedule::vp();
        assert!(matches!(sched.eval(0.0), Err(Error::TimeOutOfRange { .. })));
        assert!(sched.eval(1.0 + 1e-12).is_err());
        assert!(sched.eval(f64::NAN).is_err());
    }

    #[test]
    fn initial_noise_scaling() {
        let shape = crate::image::Shape::new(1, 2, 1).unwrap();
        let e = Image::new(shape, vec![0.5, -1.0]).unwrap();
        assert_eq!(Schedule::vp().scale_initial_noise(&e), e);
        assert_eq!(Schedule::sub_vp().scale_initial_noise(&e), e);
        assert_eq!(
            Schedule::ve().scale_initial_noise(&e).data(),
            &[25.0, -50.0]
        );
        for k in KINDS {
            let z = Image::zeros(shape);
            assert_eq!(Schedule::new(k).scale_initial_noise(&z), z);
        }
    }

    #[test]
    fn closed_forms_match_quadrature() {
        for k in KINDS {
            let dev = Schedule::new(k).check_consistency(256).unwrap();
            assert!(dev < 1e-8, "{k}: {dev}");
            assert!(Schedule::new(k).check_consistency(2).unwrap().is_finite());
        }
        assert!(Schedule::vp().check_consistency(1).is_err());
    }

    #[test]
    fn monotone_profiles() {
        for k in KINDS {
            let sched = Schedule::new(k);
            let grid: Vec<_> = (0..200)
                .map(|i| {
                    sched
                        .eval(sched.t_min + (1.0 - sched.t_min) * i as f64 / 199.0)
                        .unwrap()
                })
                .collect();
            for w in grid.windows(2) {
                assert!(w[1].sigma > w[0].sigma, "{k}");
                assert!(w[1].s <= w[0].s, "{k}");
            }
        }
    }

    #[test]
    fn diffusion_matches_variance_derivative() {
        // g^2 = s^2 d(sigma^2)/dt, by central differences.
        let h = 1e-6;
        for k in KINDS {
            let sched = Schedule::new(k);
            for t in [0.01, 0.2, 0.5, 0.9] {
                let c = sched.eval(t).unwrap();
                let sp = sched.eval_unclipped(t + h).sigma;
                let sm = sched.eval_unclipped(t - h).sigma;
                let fd = c.s * c.s * (sp * sp - sm * sm) / (2.0 * h);
                let rel = (fd - c.g_sq).abs() / c.g_sq;
                assert!(rel < 1e-6, "{k} t={t}: {rel}");
            }
        }
    }

    #[test]
    fn sigma_inverse() {
        for k in KINDS {
            let sched = Schedule::new(k);
            for t in [1e-3, 0.1, 0.5, 1.0] {
                let back = sched.t_from_sigma(sched.eval(t).unwrap().sigma);
                assert!((back - t).abs() < 1e-10, "{k} {t} {back}");
            }
        }
    }

    #[test]
    fn validation() {
        assert!(Schedule::vp().validate().is_ok());
        assert!(Schedule::vp()
            .with_time_bounds(0.0, 1.0)
            .validate()
            .is_err());
        let mut s = Schedule::ve();
        s.sigma_max = 0.001;
        assert!(s.validate().is_err());
        assert_eq!(
            "sub-vp".parse::<ScheduleKind>().unwrap(),
            ScheduleKind::SubVp
        );
        assert!("cosine".parse::<ScheduleKind>().is_err());
    }
}

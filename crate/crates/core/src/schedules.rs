//! Variance-preserving scale/noise schedules in sampling time.
//!
//! Sampling time `s` runs from `t0` (pure noise) to `t1` (data). Internally the
//! schedule is parameterised by diffusion time `tau = (t1 - s) / (t1 - t0)`, with
//! a linear noising rate `beta(tau) = beta_min + tau * (beta_max - beta_min)`.
//!
//! The defaults (`beta_min = 0.1`, `beta_max = 20`) are the continuous limit of a
//! 1000-step linear DDPM scheduler with per-step betas in `[1e-4, 0.02]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed when checking that a time lies inside a closed interval.
/// Grid points are accumulated as `s_start + i * dt` and may overshoot by an ulp or two.
pub(crate) const TIME_SLACK: f64 = 1e-12;

pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const DEFAULT_BETA_MAX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    beta_min: f64,
    beta_max: f64,
    t0: f64,
    t1: f64,
    t1_trunc: f64,
}

/// Probability-flow ODE velocity coefficients: `v(s, z) = a * z + b * score(s, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeCoefficients {
    pub a: f64,
    pub b: f64,
}

/// Reverse-SDE coefficients: drift `drift_z * z + drift_score * score`, diffusion `diffusion * dW`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeCoefficients {
    pub drift_z: f64,
    pub drift_score: f64,
    pub diffusion: f64,
}

impl Schedule {
    pub fn new(beta_min: f64, beta_max: f64, t0: f64, t1: f64, t1_trunc: f64) -> Result<Self> {
        if !(beta_min.is_finite() && beta_max.is_finite() && beta_min > 0.0 && beta_min <= beta_max) {
            return Err(Error::construction(format!(
                "schedule rates must satisfy 0 < beta_min <= beta_max (got {beta_min}, {beta_max})"
            )));
        }
        if !(t0.is_finite() && t1.is_finite() && t1_trunc.is_finite() && t0 < t1_trunc && t1_trunc < t1) {
            return Err(Error::construction(format!(
                "schedule times must satisfy t0 < t1_trunc < t1 (got {t0}, {t1_trunc}, {t1})"
            )));
        }
        Ok(Self {
            beta_min,
            beta_max,
            t0,
            t1,
            t1_trunc,
        })
    }

    /// Linear DDPM schedule on `[0, 1]`, truncated one step of size `dt` before the data end.
    pub fn linear(dt: f64) -> Result<Self> {
        Self::new(DEFAULT_BETA_MIN, DEFAULT_BETA_MAX, 0.0, 1.0, 1.0 - dt)
    }

    /// Same curves, different truncation time.
    pub fn with_truncation(&self, t1_trunc: f64) -> Result<Self> {
        Self::new(self.beta_min, self.beta_max, self.t0, self.t1, t1_trunc)
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn t1_trunc(&self) -> f64 {
        self.t1_trunc
    }

    /// Linear noising rate in diffusion time.
    pub fn beta(&self, tau: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::domain(format!("diffusion time {tau} outside [0, 1]")));
        }
        Ok(self.beta_min + tau * (self.beta_max - self.beta_min))
    }

    /// Integrated rate `B(tau) = ∫_0^tau beta(u) du`.
    fn integrated_beta(&self, tau: f64) -> f64 {
        self.beta_min * tau + 0.5 * (self.beta_max - self.beta_min) * tau * tau
    }

    fn tau_checked(&self, s: f64, upper: f64, what: &str) -> Result<f64> {
        if !s.is_finite() || s < self.t0 - TIME_SLACK || s > upper + TIME_SLACK {
            return Err(Error::domain(format!(
                "sampling time {s} outside [{}, {upper}] ({what})",
                self.t0
            )));
        }
        Ok(((self.t1 - s) / (self.t1 - self.t0)).clamp(0.0, 1.0))
    }

    /// Scale and noise levels at sampling time `s`.
    pub fn alpha_sigma(&self, s: f64) -> Result<(f64, f64)> {
        let tau = self.tau_checked(s, self.t1, "alpha_sigma")?;
        let big_b = self.integrated_beta(tau);
        let alpha = (-0.5 * big_b).exp();
        // 1 - exp(-B) without cancellation near the data end
        let sigma = (-(-big_b).exp_m1()).sqrt();
        Ok((alpha, sigma))
    }

    /// Rate of change of diffusion time per unit sampling time.
    fn time_scale(&self) -> f64 {
        1.0 / (self.t1 - self.t0)
    }

    pub fn ode_coefficients(&self, s: f64) -> Result<OdeCoefficients> {
        let tau = self.tau_checked(s, self.t1_trunc, "ode_coefficients")?;
        let half_beta = 0.5 * self.beta(tau)? * self.time_scale();
        Ok(OdeCoefficients {
            a: half_beta,
            b: half_beta,
        })
    }

    pub fn sde_coefficients(&self, s: f64) -> Result<SdeCoefficients> {
        let tau = self.tau_checked(s, self.t1_trunc, "sde_coefficients")?;
        let beta = self.beta(tau)? * self.time_scale();
        Ok(SdeCoefficients {
            drift_z: 0.5 * beta,
            drift_score: beta,
            diffusion: beta.sqrt(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> Schedule {
        Schedule::linear(1e-3).unwrap()
    }

    #[test]
    fn beta_endpoints_and_midpoint() {
        let s = sched();
        assert_eq!(s.beta(0.0).unwrap(), 0.1);
        assert_eq!(s.beta(1.0).unwrap(), 20.0);
        assert!((s.beta(0.5).unwrap() - 10.05).abs() < 1e-12);
        assert!(matches!(s.beta(1.5), Err(Error::Domain(_))));
        assert!(matches!(s.beta(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn alpha_sigma_endpoints() {
        let s = sched();
        assert_eq!(s.alpha_sigma(1.0).unwrap(), (1.0, 0.0));
        let (a, sg) = s.alpha_sigma(0.0).unwrap();
        assert!((a - (-5.025f64).exp()).abs() < 1e-15);
        assert!((sg - (1.0 - (-10.05f64).exp()).sqrt()).abs() < 1e-15);
        assert!((a - 6.55e-3).abs() < 5e-5);
        assert!(matches!(s.alpha_sigma(1.5), Err(Error::Domain(_))));
        assert!(matches!(s.alpha_sigma(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn vp_identity_on_fine_grid() {
        let s = sched();
        for i in 0..1000 {
            let t = i as f64 / 999.0;
            let (a, sg) = s.alpha_sigma(t).unwrap();
            assert!((a * a + sg * sg - 1.0).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn alpha_increasing_sigma_decreasing() {
        let s = sched();
        let mut prev = s.alpha_sigma(0.0).unwrap();
        for i in 1..=10_000 {
            let cur = s.alpha_sigma(i as f64 / 10_000.0).unwrap();
            assert!(cur.0 > prev.0 && cur.1 < prev.1, "step {i}");
            prev = cur;
        }
    }

    #[test]
    fn continuous_rescaling_tracks_discrete_scheduler() {
        // 1000-step linear scheduler, betas in [1e-4, 0.02]
        let n = 1000;
        let betas: Vec<f64> = (0..n)
            .map(|i| 1e-4 + (0.02 - 1e-4) * i as f64 / (n - 1) as f64)
            .collect();
        let log_alpha_discrete: f64 = betas.iter().map(|b| 0.5 * (1.0 - b).ln()).sum();
        let alpha_discrete = log_alpha_discrete.exp();
        let (alpha_cont, _) = sched().alpha_sigma(0.0).unwrap();

        // integrated noise level (the exponent) agrees within 2%
        let rel_exponent = (alpha_cont.ln() - log_alpha_discrete).abs() / log_alpha_discrete.abs();
        assert!(rel_exponent < 0.02, "exponent mismatch {rel_exponent}");

        // the remaining gap on alpha itself is the second-order term -1/4 Σβ², about 3.4%
        let second_order: f64 = betas.iter().map(|b| 0.25 * b * b).sum();
        let predicted_ratio = second_order.exp();
        assert!((alpha_cont / alpha_discrete - predicted_ratio).abs() < 1e-3);
        assert!((alpha_cont / alpha_discrete - 1.0344).abs() < 1e-3);
    }

    #[test]
    fn ode_coefficients_examples() {
        let s = sched();
        let c0 = s.ode_coefficients(0.0).unwrap();
        assert!((c0.a - 10.0).abs() < 1e-12 && c0.a == c0.b);
        // evaluate at t1 on an untruncated-looking schedule (truncation just below t1)
        let s1 = s.with_truncation(1.0 - 1e-15).unwrap();
        let c1 = s1.ode_coefficients(1.0 - 1e-15).unwrap();
        assert!((c1.a - 0.05).abs() < 1e-10);
        for i in 0..100 {
            let c = s.ode_coefficients(i as f64 * 0.00999).unwrap();
            assert_eq!(c.a, c.b);
        }
        assert!(s.ode_coefficients(0.9995).is_err());
    }

    #[test]
    fn sde_coefficients_examples() {
        let s = sched();
        let c = s.sde_coefficients(0.0).unwrap();
        assert!((c.drift_z - 10.0).abs() < 1e-12);
        assert!((c.drift_score - 20.0).abs() < 1e-12);
        assert!((c.diffusion - 20f64.sqrt()).abs() < 1e-12);
        for i in 0..100 {
            let t = i as f64 * 0.00999;
            let sde = s.sde_coefficients(t).unwrap();
            let ode = s.ode_coefficients(t).unwrap();
            assert_eq!(sde.drift_score, 2.0 * ode.b);
            assert!((sde.diffusion * sde.diffusion - sde.drift_score).abs() < 1e-12);
        }
    }

    #[test]
    fn construction_rejects_bad_parameters() {
        assert!(Schedule::new(0.0, 20.0, 0.0, 1.0, 0.9).is_err());
        assert!(Schedule::new(2.0, 1.0, 0.0, 1.0, 0.9).is_err());
        assert!(Schedule::new(0.1, 20.0, 0.0, 1.0, 1.0).is_err());
        assert!(Schedule::new(0.1, 20.0, 0.5, 1.0, 0.2).is_err());
    }
}

//! Truncated cosine noise schedule and its log-noise-ratio algebra.
//!
//! alpha(t) = cos(pi t / 2), sigma(t) = sin(pi t / 2), so the variance-
//! preserving identity alpha^2 + sigma^2 = 1 holds by construction. The
//! quantity lambda(t) = log(sigma/alpha) = log tan(pi t / 2) is the natural
//! integration variable of the signal-space ODE: the exact one-step update
//! keeps a fraction exp(lambda(s) - lambda(t)) of the previous signal
//! estimate, and that fraction equals alpha_t sigma_s / (sigma_t alpha_s).

use crate::error::{BootError, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const DEFAULT_T_MIN: f64 = 0.02;
pub const DEFAULT_T_MAX: f64 = 0.98;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
        }
    }
}

impl NoiseSchedule {
    pub fn cosine(t_min: f64, t_max: f64) -> Result<Self> {
        if !(t_min.is_finite() && t_max.is_finite() && 0.0 < t_min && t_min < t_max && t_max < 1.0)
        {
            return Err(BootError::domain(format!(
                "truncation must satisfy 0 < t_min < t_max < 1, got ({t_min}, {t_max})"
            )));
        }
        Ok(NoiseSchedule { t_min, t_max })
    }

    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::cosine(self.t_min, self.t_max).map(|_| ())
    }

    /// (alpha, sigma) at `t`; defined on the closed interval [0, 1].
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(BootError::domain(format!(
                "alpha_sigma defined on [0, 1], got t = {t}"
            )));
        }
        Ok(((PI * t / 2.0).cos(), (PI * t / 2.0).sin()))
    }

    /// lambda(t) = log(sigma / alpha), strictly increasing on (0, 1).
    pub fn log_noise_ratio(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t < 1.0) {
            return Err(BootError::domain(format!(
                "log_noise_ratio defined on (0, 1), got t = {t}"
            )));
        }
        Ok((PI * t / 2.0).tan().ln())
    }

    /// d lambda / dt = pi / sin(pi t).
    pub fn log_noise_ratio_slope(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t < 1.0) {
            return Err(BootError::domain(format!(
                "log_noise_ratio_slope defined on (0, 1), got t = {t}"
            )));
        }
        Ok(PI / (PI * t).sin())
    }

    /// Backward-difference estimate of the slope over [t - delta, t],
    /// computed as (1 - alpha_t sigma_s / (sigma_t alpha_s)) / delta.
    /// First-order accurate in delta.
    pub fn log_noise_ratio_slope_discrete(&self, t: f64, delta: f64) -> Result<f64> {
        if delta <= 0.0 {
            return Err(BootError::domain(format!(
                "discrete slope needs delta > 0, got {delta}"
            )));
        }
        let s = t - delta;
        if !(s > 0.0 && t < 1.0) {
            return Err(BootError::domain(format!(
                "discrete slope needs 0 < t - delta and t < 1, got t = {t}, delta = {delta}"
            )));
        }
        let (at, st) = self.alpha_sigma(t)?;
        let (as_, ss) = self.alpha_sigma(s)?;
        Ok((1.0 - at * ss / (st * as_)) / delta)
    }

    /// exp(lambda(s) - lambda(t)): the fraction of the signal estimate at
    /// time t that survives an exact step to the earlier time s.
    pub fn signal_retention(&self, s: f64, t: f64) -> Result<f64> {
        Ok((self.log_noise_ratio(s)? - self.log_noise_ratio(t)?).exp())
    }

    /// n_steps + 1 uniform grid times from t_max down to t_min.
    pub fn descending_grid(&self, n_steps: usize) -> Result<Vec<f64>> {
        if n_steps == 0 {
            return Err(BootError::contract("grid needs at least one step"));
        }
        let h = (self.t_max - self.t_min) / n_steps as f64;
        let mut ts: Vec<f64> = (0..=n_steps).map(|i| self.t_max - h * i as f64).collect();
        // Pin the endpoint so accumulated rounding never leaves the domain.
        ts[n_steps] = self.t_min;
        Ok(ts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn endpoints_and_midpoint() {
        let s = sched();
        assert_eq!(s.alpha_sigma(0.0).unwrap(), (1.0, 0.0));
        let (a, b) = s.alpha_sigma(0.5).unwrap();
        let r = (2.0f64).sqrt() / 2.0;
        assert!((a - r).abs() < 1e-15 && (b - r).abs() < 1e-15);
        let (a, b) = s.alpha_sigma(1.0).unwrap();
        assert!(a.abs() < 1e-16 && (b - 1.0).abs() < 1e-16);
    }

    #[test]
    fn quarter_point_closed_form() {
        let s = sched();
        let (a, b) = s.alpha_sigma(0.25).unwrap();
        assert!((a - (PI / 8.0).cos()).abs() < 1e-16);
        assert!((b - (PI / 8.0).sin()).abs() < 1e-16);
        // log tan(pi/8) = -log(1 + sqrt(2))
        let l = s.log_noise_ratio(0.25).unwrap();
        assert!((l - (-(1.0 + 2.0f64.sqrt()).ln())).abs() < 1e-14);
        assert!((l + 0.881373587019543).abs() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        let s = sched();
        assert!(s.alpha_sigma(-0.01).is_err());
        assert!(s.alpha_sigma(1.01).is_err());
        assert!(s.log_noise_ratio(0.0).is_err());
        assert!(s.log_noise_ratio(1.0).is_err());
        assert!(s.log_noise_ratio_slope_discrete(0.5, 0.0).is_err());
        assert!(s.log_noise_ratio_slope_discrete(0.03, 0.04).is_err());
        assert!(NoiseSchedule::cosine(0.5, 0.5).is_err());
        assert!(NoiseSchedule::cosine(0.0, 0.9).is_err());
    }

    #[test]
    fn slope_at_midpoint_is_pi_and_symmetric() {
        let s = sched();
        assert!((s.log_noise_ratio_slope(0.5).unwrap() - PI).abs() < 1e-13);
        for t in [0.1, 0.23, 0.4] {
            let a = s.log_noise_ratio_slope(t).unwrap();
            let b = s.log_noise_ratio_slope(1.0 - t).unwrap();
            assert!((a - b).abs() < 1e-12 * a.abs());
        }
    }

    #[test]
    fn slope_matches_central_difference() {
        let s = sched();
        let h = 1e-6;
        for t in [0.05, 0.2, 0.5, 0.77, 0.95] {
            let fd = (s.log_noise_ratio(t + h).unwrap() - s.log_noise_ratio(t - h).unwrap())
                / (2.0 * h);
            let an = s.log_noise_ratio_slope(t).unwrap();
            assert!((fd - an).abs() / an.abs() < 1e-8, "t = {t}");
        }
    }

    #[test]
    fn discrete_slope_matches_quoted_value() {
        let s = sched();
        let d = s.log_noise_ratio_slope_discrete(0.5, 0.04).unwrap();
        let expected = 1.0 - (0.46 * PI / 2.0).tan() / (PI / 4.0).tan();
        assert!((d * 0.04 - expected).abs() < 1e-12);
        assert!((d * 0.04 - 0.118382).abs() < 1e-6);
    }

    /// The backward difference is first order: halving delta halves the
    /// error against the exact slope pi at t = 0.5.
    #[test]
    fn discrete_slope_is_first_order() {
        let s = sched();
        let e1 = (s.log_noise_ratio_slope_discrete(0.5, 0.02).unwrap() - PI).abs();
        let e2 = (s.log_noise_ratio_slope_discrete(0.5, 0.01).unwrap() - PI).abs();
        let ratio = e1 / e2;
        assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn retention_equals_alpha_sigma_ratio() {
        let s = sched();
        for (t, dt) in [(0.5, 0.25), (0.9, 0.3), (0.1, 0.05)] {
            let u = t - dt;
            let r = s.signal_retention(u, t).unwrap();
            let (at, st) = s.alpha_sigma(t).unwrap();
            let (au, su) = s.alpha_sigma(u).unwrap();
            assert!((r - at * su / (st * au)).abs() < 1e-12);
        }
        // Quoted value: tan(pi/8) / tan(pi/4)
        let r = s.signal_retention(0.25, 0.5).unwrap();
        assert!((r - 0.414214).abs() < 1e-6);
    }

    #[test]
    fn descending_grid_hits_both_ends() {
        let s = sched();
        let g = s.descending_grid(64).unwrap();
        assert_eq!(g.len(), 65);
        assert_eq!(g[0], s.t_max);
        assert_eq!(g[64], s.t_min);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    proptest! {
        #[test]
        fn variance_preserving_identity(t in 0.0f64..=1.0) {
            let (a, s) = sched().alpha_sigma(t).unwrap();
            prop_assert!((a * a + s * s - 1.0).abs() < 1e-15);
        }

        #[test]
        fn log_noise_ratio_is_strictly_increasing(a in 0.001f64..0.997, d in 0.001f64..0.5) {
            let b = (a + d).min(0.999);
            prop_assume!(b > a);
            let s = sched();
            prop_assert!(s.log_noise_ratio(b).unwrap() > s.log_noise_ratio(a).unwrap());
        }

        #[test]
        fn retention_route_identity(t in 0.02f64..0.98, frac in 0.01f64..1.0) {
            let s_t = 0.01f64.max(t - frac * (t - 0.01));
            prop_assume!(s_t < t);
            let sch = sched();
            let via_exp = sch.signal_retention(s_t, t).unwrap();
            let (at, st) = sch.alpha_sigma(t).unwrap();
            let (as_, ss) = sch.alpha_sigma(s_t).unwrap();
            prop_assert!((via_exp - at * ss / (st * as_)).abs() <= 1e-12);
        }
    }
}

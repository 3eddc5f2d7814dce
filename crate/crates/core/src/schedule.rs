//! Variance-preserving noise schedule and the integrating factors that enter
//! the transport-map error bounds.
//!
//! All times are normalized: the schedule lives on `[0, t_max]` and sampling
//! stops at `eps > 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of composite-Simpson subintervals.
pub const DEFAULT_PANELS: usize = 1024;

/// Linear VP schedule `beta(t) = beta_min + t / t_max * (beta_max - beta_min)`.
///
/// Drift and diffusion follow from it as `f = beta / 2` and `g = sqrt(beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_max: f64,
    pub eps: f64,
}

impl Default for NoiseSchedule {
    /// DDPM's `beta_1 = 2e-4`, `beta_T = 0.01`, `T = 1000`, rescaled to the unit
    /// horizon, with end time `eps = 1e-3`.
    fn default() -> Self {
        Self {
            beta_min: 0.2,
            beta_max: 10.0,
            t_max: 1.0,
            eps: 1e-3,
        }
    }
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64, t_max: f64, eps: f64) -> Result<Self> {
        let s = Self {
            beta_min,
            beta_max,
            t_max,
            eps,
        };
        s.validate()?;
        Ok(s)
    }

    /// Continuous limit of a discrete DDPM schedule with `steps` steps whose
    /// betas run linearly from `beta_first` to `beta_last`.
    pub fn from_discrete(beta_first: f64, beta_last: f64, steps: usize, eps: f64) -> Result<Self> {
        let n = steps as f64;
        Self::new(beta_first * n, beta_last * n, 1.0, eps)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.beta_min, self.beta_max, self.t_max, self.eps]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain("schedule parameters must be finite".into()));
        }
        if self.beta_min <= 0.0 {
            return Err(Error::Domain(format!(
                "beta_min must be positive, got {}",
                self.beta_min
            )));
        }
        if self.beta_max < self.beta_min {
            return Err(Error::Domain(format!(
                "beta must be nondecreasing: beta_max {} < beta_min {}",
                self.beta_max, self.beta_min
            )));
        }
        if self.t_max <= 0.0 {
            return Err(Error::Domain(format!("t_max must be positive, got {}", self.t_max)));
        }
        if !(self.eps > 0.0 && self.eps < self.t_max) {
            return Err(Error::Domain(format!("eps must lie in (0, t_max), got {}", self.eps)));
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        // Allow a hair of round-off past t_max from grid arithmetic.
        if !(t >= 0.0 && t <= self.t_max * (1.0 + 1e-12)) {
            return Err(Error::Domain(format!("time {t} outside [0, {}]", self.t_max)));
        }
        Ok(())
    }

    #[inline]
    fn slope(&self) -> f64 {
        (self.beta_max - self.beta_min) / self.t_max
    }

    /// `beta(t)`; unchecked.
    #[inline]
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * self.slope()
    }

    /// Drift and diffusion coefficients `(f, g) = (beta / 2, sqrt(beta))`.
    pub fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        let b = self.beta(t);
        Ok((0.5 * b, b.sqrt()))
    }

    /// `B(t) = int_0^t beta`; unchecked.
    #[inline]
    pub fn cumulative_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * self.slope() * t * t
    }

    /// `m(t) = exp(-int_0^t f)`, the mean scale of the transition kernel.
    pub fn mean_scale(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok((-0.5 * self.cumulative_beta(t)).exp())
    }

    /// `sigma^2(t) = 1 - m(t)^2`.
    pub fn variance(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(-(-self.cumulative_beta(t)).exp_m1())
    }

    /// `ln(sigma(t) / m(t))`, the half log inverse signal-to-noise ratio.
    ///
    /// Strictly increasing in `t`; the flow integrator steps uniformly in it.
    pub fn half_log_inv_snr(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        if t == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(0.5 * self.cumulative_beta(t).exp_m1().ln())
    }

    /// Inverse of [`half_log_inv_snr`](Self::half_log_inv_snr).
    pub fn time_at_half_log_inv_snr(&self, lambda: f64) -> f64 {
        // B = ln(1 + e^{2 lambda}), then solve the quadratic B(t) = B.
        let b = (2.0 * lambda).exp().ln_1p();
        let s = self.slope();
        2.0 * b / (self.beta_min + (self.beta_min * self.beta_min + 2.0 * s * b).sqrt())
    }

    /// Returns a copy on a longer or shorter horizon with the same `beta(t)`.
    pub fn extended(&self, t_max: f64) -> Result<Self> {
        Self::new(self.beta_min, self.beta_min + self.slope() * t_max, t_max, self.eps)
    }

    /// Returns a copy with a different horizon, keeping the beta endpoints.
    pub fn with_t_max(&self, t_max: f64) -> Result<Self> {
        Self::new(self.beta_min, self.beta_max, t_max, self.eps)
    }
}

/// Caller-supplied bound `L(t)` on the spatial Lipschitz constant of the score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzBound {
    Constant(f64),
    /// Piecewise-linear through `(t, L)` knots, held constant outside them.
    Tabulated(Vec<(f64, f64)>),
}

impl LipschitzBound {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            LipschitzBound::Constant(l) => *l,
            LipschitzBound::Tabulated(knots) => {
                let Some(first) = knots.first() else {
                    return 0.0;
                };
                if t <= first.0 {
                    return first.1;
                }
                for w in knots.windows(2) {
                    let (t0, l0) = w[0];
                    let (t1, l1) = w[1];
                    if t <= t1 {
                        let a = (t - t0) / (t1 - t0);
                        return l0 + a * (l1 - l0);
                    }
                }
                knots[knots.len() - 1].1
            }
        }
    }

    /// Adds a constant, e.g. the Lipschitz constant of a score perturbation.
    pub fn shifted(&self, by: f64) -> Self {
        match self {
            LipschitzBound::Constant(l) => LipschitzBound::Constant(l + by),
            LipschitzBound::Tabulated(k) => LipschitzBound::Tabulated(k.iter().map(|&(t, l)| (t, l + by)).collect()),
        }
    }
}

/// `I(t) = exp(int_0^t (f + g^2 L / 2))` and `Ibar(t) = exp(1/2 int_0^t f)`.
///
/// `I` overflows `f64` for realistic Lipschitz bounds, so everything is also
/// available in log form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratingFactors {
    pub schedule: NoiseSchedule,
    pub lipschitz: LipschitzBound,
    pub panels: usize,
}

impl IntegratingFactors {
    pub fn new(schedule: NoiseSchedule, lipschitz: LipschitzBound) -> Self {
        Self {
            schedule,
            lipschitz,
            panels: DEFAULT_PANELS,
        }
    }

    /// Uses `L = 1 / sigma^2(eps)`, the worst-case Gaussian-mixture bound at
    /// the end time.
    pub fn with_default_bound(schedule: NoiseSchedule) -> Result<Self> {
        let l = 1.0 / schedule.variance(schedule.eps)?;
        Ok(Self::new(schedule, LipschitzBound::Constant(l)))
    }

    pub fn with_panels(mut self, panels: usize) -> Self {
        self.panels = panels.max(2);
        self
    }

    pub fn log_i(&self, t: f64) -> Result<f64> {
        self.schedule.check_time(t)?;
        let s = self.schedule;
        let lip = &self.lipschitz;
        Ok(simpson(
            |tau| {
                let b = s.beta(tau);
                0.5 * b + 0.5 * b * lip.at(tau)
            },
            0.0,
            t,
            self.panels,
        ))
    }

    pub fn integrating_factor(&self, t: f64) -> Result<f64> {
        Ok(self.log_i(t)?.exp())
    }

    pub fn log_i_bar(&self, t: f64) -> Result<f64> {
        self.schedule.check_time(t)?;
        let s = self.schedule;
        Ok(0.5 * simpson(|tau| 0.5 * s.beta(tau), 0.0, t, self.panels))
    }

    pub fn integrating_factor_bar(&self, t: f64) -> Result<f64> {
        Ok(self.log_i_bar(t)?.exp())
    }

    /// `ln phi(t)` for the weight `phi = g^4 I^2`.
    pub fn log_weight(&self, t: f64) -> Result<f64> {
        let b = self.schedule.beta(t);
        Ok(2.0 * b.ln() + 2.0 * self.log_i(t)?)
    }
}

/// Composite Simpson rule with `n` subintervals (rounded up to even).
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    if a == b {
        return 0.0;
    }
    let n = if n % 2 == 1 { n + 1 } else { n.max(2) };
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

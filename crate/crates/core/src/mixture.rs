//! Exact marginals `p_t` of a VP diffusion started from a point cloud.
//!
//! `p_t` is the Gaussian mixture `(1/|I|) sum_i N(m(t) x_i, sigma^2(t) Id)`, so
//! density, score and probability-flow velocity are available in closed form.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::cloud::{sq_dist, PointCloud};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureMarginal {
    cloud: Arc<PointCloud>,
    t: f64,
    mean_scale: f64,
    variance: f64,
}

/// `p_t` for the given schedule; `t <= 0` is a hard error.
pub fn marginal(schedule: &NoiseSchedule, cloud: Arc<PointCloud>, t: f64) -> Result<MixtureMarginal> {
    if !(t > 0.0) {
        return Err(Error::Singularity(t));
    }
    let m = schedule.mean_scale(t)?;
    let v = schedule.variance(t)?;
    MixtureMarginal::from_parts(cloud, t, m, v)
}

impl MixtureMarginal {
    pub fn from_parts(cloud: Arc<PointCloud>, t: f64, mean_scale: f64, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::Singularity(t));
        }
        Ok(Self {
            cloud,
            t,
            mean_scale,
            variance,
        })
    }

    /// The steady state `p_inf = N(0, Id)`, as the degenerate mixture `m = 0`.
    pub fn standard_normal(dim: usize) -> Self {
        let cloud = PointCloud::new(dim, vec![0.0; dim], None).expect("dim > 0");
        Self {
            cloud: Arc::new(cloud),
            t: f64::INFINITY,
            mean_scale: 0.0,
            variance: 1.0,
        }
    }

    pub fn cloud(&self) -> &Arc<PointCloud> {
        &self.cloud
    }
    pub fn time(&self) -> f64 {
        self.t
    }
    pub fn mean_scale(&self) -> f64 {
        self.mean_scale
    }
    pub fn variance(&self) -> f64 {
        self.variance
    }
    pub fn dim(&self) -> usize {
        self.cloud.dim()
    }

    fn component_mean(&self, i: usize, out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(self.cloud.point(i)) {
            *o = self.mean_scale * x;
        }
    }

    /// Per-component log-likelihood exponents `-|x - m x_i|^2 / (2 sigma^2)`.
    fn exponents(&self, x: &[f64], out: &mut Vec<f64>) {
        let m = self.mean_scale;
        let inv = 0.5 / self.variance;
        out.clear();
        out.extend(self.cloud.points().map(|p| {
            let d: f64 = p.iter().zip(x).map(|(pi, xi)| (xi - m * pi) * (xi - m * pi)).sum();
            -d * inv
        }));
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut e = Vec::with_capacity(self.cloud.len());
        self.exponents(x, &mut e);
        let n = self.cloud.len() as f64;
        let d = self.dim() as f64;
        log_sum_exp(&e) - n.ln() - 0.5 * d * (LN_2PI + self.variance.ln())
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// `grad log p_t(x)`, computed with max-shifted responsibilities.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let mut scratch = Vec::with_capacity(self.cloud.len());
        self.score_into(x, &mut out, &mut scratch);
        out
    }

    /// Allocation-free score for hot loops.
    pub fn score_into(&self, x: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
        self.exponents(x, scratch);
        let mx = scratch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for e in scratch.iter_mut() {
            *e = (*e - mx).exp();
            z += *e;
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        let m = self.mean_scale;
        for (r, p) in scratch.iter().zip(self.cloud.points()) {
            let w = r / z;
            for (o, pi) in out.iter_mut().zip(p) {
                *o += w * m * pi;
            }
        }
        for (o, xi) in out.iter_mut().zip(x) {
            *o = (*o - xi) / self.variance;
        }
    }

    /// Probability-flow velocity `-f x - (g^2 / 2) grad log p_t(x)`.
    pub fn velocity(&self, schedule: &NoiseSchedule, x: &[f64]) -> Result<Vec<f64>> {
        if !(self.t > 0.0) {
            return Err(Error::Singularity(self.t));
        }
        let (f, g) = schedule.coefficients(self.t)?;
        let s = self.score(x);
        Ok(x.iter().zip(&s).map(|(xi, si)| -f * xi - 0.5 * g * g * si).collect())
    }

    /// i.i.d. draws, flattened row-major. Deterministic given `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<f64> {
        let n = self.cloud.len();
        let sd = self.variance.sqrt();
        rng::fill_chunked(seed, count, self.dim(), |r, out| {
            let i = if n == 1 { 0 } else { rand::Rng::random_range(r, 0..n) };
            self.component_mean(i, out);
            for o in out.iter_mut() {
                let z: f64 = StandardNormal.sample(r);
                *o += sd * z;
            }
        })
    }

    fn require_1d(&self) -> Result<()> {
        if self.dim() != 1 {
            return Err(Error::Usage(format!(
                "1D query on a {}-dimensional marginal",
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn cdf_1d(&self, x: f64) -> Result<f64> {
        self.require_1d()?;
        Ok(self.cdf_unchecked(x))
    }

    fn cdf_unchecked(&self, x: f64) -> f64 {
        let sd = self.variance.sqrt();
        let n = self.cloud.len() as f64;
        let s: f64 = self
            .cloud
            .as_flat()
            .iter()
            .map(|&p| std_normal_cdf((x - self.mean_scale * p) / sd))
            .sum();
        (s / n).clamp(0.0, 1.0)
    }

    pub fn pdf_1d(&self, x: f64) -> Result<f64> {
        self.require_1d()?;
        Ok(self.density(&[x]))
    }

    /// Inverse CDF by bracketed bisection with a Newton polish.
    pub fn quantile_1d(&self, p: f64) -> Result<f64> {
        self.require_1d()?;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("quantile level {p} outside (0, 1)")));
        }
        let sd = self.variance.sqrt();
        let means = self.cloud.as_flat().iter().map(|&v| self.mean_scale * v);
        let (lo_m, hi_m) = means.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let mut lo = lo_m - 10.0 * sd;
        let mut hi = hi_m + 10.0 * sd;
        while self.cdf_unchecked(lo) > p {
            lo -= 10.0 * sd;
        }
        while self.cdf_unchecked(hi) < p {
            hi += 10.0 * sd;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf_unchecked(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut q = 0.5 * (lo + hi);
        for _ in 0..3 {
            let r = self.cdf_unchecked(q) - p;
            if r.abs() <= 1e-15 {
                break;
            }
            let d = self.density(&[q]);
            if d <= 0.0 {
                break;
            }
            let next = q - r / d;
            if next < lo || next > hi {
                break;
            }
            q = next;
        }
        Ok(q)
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile: `erfc_inv` start, two Newton steps.
pub fn std_normal_quantile(p: f64) -> f64 {
    use statrs::function::erf::erfc_inv;
    let mut q = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    if !q.is_finite() {
        return q;
    }
    for _ in 0..2 {
        let d = std_normal_pdf(q);
        if d <= 0.0 {
            break;
        }
        q -= (std_normal_cdf(q) - p) / d;
    }
    q
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - 0.5 * LN_2PI).exp()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.iter().map(|e| (e - mx).exp()).sum::<f64>().ln()
}

/// Mean squared distance helper used by tests and diagnostics.
pub fn mean_sq_dist(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let n = a.len() / dim;
    a.chunks_exact(dim)
        .zip(b.chunks_exact(dim))
        .map(|(x, y)| sq_dist(x, y))
        .sum::<f64>()
        / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn cloud1(pts: &[f64]) -> Arc<PointCloud> {
        Arc::new(PointCloud::new(1, pts.to_vec(), None).unwrap())
    }

    fn two_point(m: f64, v: f64) -> MixtureMarginal {
        MixtureMarginal::from_parts(cloud1(&[-1.0, 1.0]), 0.5, m, v).unwrap()
    }

    #[test]
    fn zero_time_is_singular() {
        let s = NoiseSchedule::default();
        assert!(matches!(marginal(&s, cloud1(&[0.0]), 0.0), Err(Error::Singularity(_))));
    }

    #[test]
    fn single_centered_point_is_gaussian() {
        let s = NoiseSchedule::default();
        let p = marginal(&s, cloud1(&[0.0]), 0.3).unwrap();
        let v = s.variance(0.3).unwrap();
        let x = 0.7;
        let expect = -0.5 * x * x / v - 0.5 * (LN_2PI + v.ln());
        assert_relative_eq!(p.log_density(&[x]), expect, max_relative = 1e-14);
    }

    #[test]
    fn strong_mixing_approaches_standard_normal() {
        let s = NoiseSchedule::new(20.0, 60.0, 1.0, 1e-3).unwrap();
        let p = marginal(&s, cloud1(&[-2.0, 0.5, 3.0]), 1.0).unwrap();
        let q = MixtureMarginal::standard_normal(1);
        for &x in &[-2.0, 0.0, 1.5] {
            assert_relative_eq!(p.log_density(&[x]), q.log_density(&[x]), epsilon = 1e-7);
        }
    }

    #[test]
    fn two_point_density_by_direct_summation() {
        let p = two_point(0.5, 0.75);
        let pdf = |x: f64, mu: f64| (-(x - mu) * (x - mu) / 1.5).exp() / (2.0 * std::f64::consts::PI * 0.75).sqrt();
        let direct = 0.5 * (pdf(0.0, -0.5) + pdf(0.0, 0.5));
        assert!((p.density(&[0.0]) - direct).abs() <= 1e-12);
    }

    #[test]
    fn single_point_score_closed_form() {
        let p = MixtureMarginal::from_parts(cloud1(&[2.0]), 0.5, 0.6, 0.64).unwrap();
        let x = -0.3;
        assert_relative_eq!(p.score(&[x])[0], (0.6 * 2.0 - x) / 0.64, max_relative = 1e-15);
    }

    #[test]
    fn symmetric_score_vanishes_at_origin() {
        assert_eq!(two_point(0.8, 0.36).score(&[0.0])[0], 0.0);
    }

    fn fd_gradient(p: &MixtureMarginal, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[k] += h;
                b[k] -= h;
                (p.log_density(&a) - p.log_density(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..16).map(|_| r.random_range(-2.0..2.0)).collect();
        let cloud = Arc::new(PointCloud::new(2, data, None).unwrap());
        let p = marginal(&NoiseSchedule::default(), cloud, 0.2).unwrap();
        for _ in 0..100 {
            let x = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
            let s = p.score(&x);
            let fd = fd_gradient(&p, &x, 1e-5);
            let err = ((s[0] - fd[0]).powi(2) + (s[1] - fd[1]).powi(2)).sqrt();
            let norm = (s[0] * s[0] + s[1] * s[1]).sqrt().max(1e-3);
            assert!(err / norm <= 1e-5, "rel err {}", err / norm);
        }
    }

    #[test]
    fn velocity_single_point_closed_form() {
        let s = NoiseSchedule::default();
        let p = marginal(&s, cloud1(&[0.0]), 0.4).unwrap();
        let (f, g) = s.coefficients(0.4).unwrap();
        let v = s.variance(0.4).unwrap();
        let x = 1.3;
        let expect = x * (g * g / (2.0 * v) - f);
        assert_relative_eq!(p.velocity(&s, &[x]).unwrap()[0], expect, max_relative = 1e-13);
    }

    #[test]
    fn velocity_at_mode_is_drift() {
        let s = NoiseSchedule::default();
        let p = marginal(&s, cloud1(&[-1.0, 1.0]), 0.4).unwrap();
        let (f, _) = s.coefficients(0.4).unwrap();
        assert_eq!(p.velocity(&s, &[0.0]).unwrap()[0], -f * 0.0);
    }

    #[test]
    fn velocity_matches_fd_score() {
        let s = NoiseSchedule::default();
        let cloud = Arc::new(PointCloud::from_rows(&[vec![1.0, 0.5], vec![-0.7, 0.2], vec![0.1, -1.4]], None).unwrap());
        let p = marginal(&s, cloud, 0.3).unwrap();
        let (f, g) = s.coefficients(0.3).unwrap();
        let x = [0.4, -0.2];
        let fd = fd_gradient(&p, &x, 1e-5);
        let v = p.velocity(&s, &x).unwrap();
        for k in 0..2 {
            let expect = -f * x[k] - 0.5 * g * g * fd[k];
            assert_relative_eq!(v[k], expect, max_relative = 1e-5);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let p = two_point(0.5, 0.75);
        assert_eq!(p.sample(100, 9), p.sample(100, 9));
        assert_ne!(p.sample(100, 9), p.sample(100, 10));
    }

    #[test]
    fn near_zero_variance_samples_hit_the_point() {
        let p = MixtureMarginal::from_parts(cloud1(&[0.25]), 1e-3, 1.0, 1e-12).unwrap();
        assert!(p.sample(1000, 1).iter().all(|v| (v - 0.25).abs() <= 1e-5));
    }

    #[test]
    fn sample_moments() {
        let p = two_point(0.5, 0.75);
        let n = 100_000;
        let xs = p.sample(n, 42);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // law of total variance: m^2 Var(points) + sigma^2 = 0.25 + 0.75
        let total = 0.25 * 1.0 + 0.75;
        let se_mean = (total / n as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se_mean, "mean {mean}");
        // Var of the sample variance for this mixture: (mu4 - sigma^4) / n.
        let mu4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
        let se_var = ((mu4 - total * total) / n as f64).sqrt();
        assert!((var - total).abs() <= 3.0 * se_var, "var {var}");
    }

    #[test]
    fn cdf_symmetry_and_round_trip() {
        let p = two_point(0.5, 0.75);
        assert!((p.cdf_1d(0.0).unwrap() - 0.5).abs() < 1e-15);
        for k in 0..=100 {
            let x = -5.0 + 0.1 * k as f64;
            let q = p.quantile_1d(p.cdf_1d(x).unwrap()).unwrap();
            assert!((q - x).abs() <= 1e-9, "x {x} q {q}");
        }
    }

    #[test]
    fn narrow_mixture_quantiles_are_accurate() {
        let p = MixtureMarginal::from_parts(cloud1(&[-1.0, 1.0]), 1e-3, 0.9995, 2e-4).unwrap();
        for k in 1..100 {
            let lvl = k as f64 / 100.0;
            let q = p.quantile_1d(lvl).unwrap();
            assert!((p.cdf_1d(q).unwrap() - lvl).abs() <= 1e-12);
        }
    }

    #[test]
    fn quantile_domain() {
        let p = two_point(0.5, 0.75);
        assert!(matches!(p.quantile_1d(0.0), Err(Error::Domain(_))));
        assert!(matches!(p.quantile_1d(1.0), Err(Error::Domain(_))));
        let two_d = MixtureMarginal::standard_normal(2);
        assert!(two_d.cdf_1d(0.0).is_err());
    }

    #[test]
    fn cdf_matches_empirical() {
        let p = MixtureMarginal::from_parts(cloud1(&[-1.3, 0.2, 2.0]), 0.3, 0.7, 0.51).unwrap();
        let n = 1_000_000;
        let mut xs = p.sample(n, 5);
        xs.sort_by(f64::total_cmp);
        let mut sup: f64 = 0.0;
        for (k, &x) in xs.iter().enumerate().step_by(97) {
            let f = p.cdf_1d(x).unwrap();
            sup = sup
                .max((f - k as f64 / n as f64).abs())
                .max((f - (k + 1) as f64 / n as f64).abs());
        }
        assert!(sup <= 0.005, "sup {sup}");
    }

    #[test]
    fn cdf_monotone() {
        let p = MixtureMarginal::from_parts(cloud1(&[-1.3, 0.2, 2.0]), 0.3, 0.7, 0.01).unwrap();
        let mut prev = 0.0;
        for k in 0..2000 {
            let c = p.cdf_1d(-4.0 + 0.004 * k as f64).unwrap();
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn total_mass_by_importance_sampling() {
        // Proposal N(0, 4 Id) in 2D.
        let cloud = Arc::new(PointCloud::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.5], vec![0.0, -1.2]], None).unwrap());
        let p = marginal(&NoiseSchedule::default(), cloud, 0.15).unwrap();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z0: f64 = StandardNormal.sample(&mut r);
            let z1: f64 = StandardNormal.sample(&mut r);
            let x = [2.0 * z0, 2.0 * z1];
            let q = (-(x[0] * x[0] + x[1] * x[1]) / 8.0).exp() / (8.0 * std::f64::consts::PI);
            acc += p.density(&x) / q;
        }
        let mass = acc / n as f64;
        assert!((mass - 1.0).abs() <= 0.01, "mass {mass}");
    }

    #[test]
    fn standard_normal_quantile_inverts_cdf() {
        for k in 1..200 {
            let p = k as f64 / 200.0;
            assert!((std_normal_cdf(std_normal_quantile(p)) - p).abs() < 1e-14);
        }
    }
}

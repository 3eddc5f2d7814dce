use rand::Rng as _;
use rayon::prelude::*;

use rand_distr::{Distribution, StandardNormal};

use crate::cloud::PointCloud;
use crate::error::Result;
use crate::metrics::{w2_exact, EmpiricalLaw};
use crate::rng;
use crate::schedule::NoiseSchedule;

/// Bootstrap replicates used for every slack term.
pub const BOOTSTRAP_REPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    LinearFit { slope, intercept, r2 }
}

/// Standard deviation of `stat` over `reps` resamples. Each replicate draws
/// one index vector (with replacement) per group size in `groups`.
pub fn bootstrap_se<F>(groups: &[usize], reps: usize, seed: u64, stat: F) -> f64
where
    F: Fn(&[Vec<usize>]) -> f64 + Sync,
{
    if reps < 2 {
        return 0.0;
    }
    let values: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut g = rng::stream(seed, r as u64);
            let idx: Vec<Vec<usize>> = groups
                .iter()
                .map(|&n| (0..n).map(|_| g.random_range(0..n)).collect())
                .collect();
            stat(&idx)
        })
        .collect();
    let m = values.iter().sum::<f64>() / reps as f64;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
}

/// Rows of a flat row-major buffer picked by `idx`.
pub(crate) fn gather(data: &[f64], dim: usize, idx: &[usize]) -> Vec<f64> {
    idx.iter()
        .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
        .collect()
}

/// Exact W2 between two equally weighted point sets.
pub(crate) fn w2_flat(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    let a = EmpiricalLaw::uniform(dim, a.to_vec())?;
    let b = EmpiricalLaw::uniform(dim, b.to_vec())?;
    Ok(w2_exact(&a, &b)?.w2())
}

/// Coupled draws from `p_t` and `p_inf`: the same standard normal `xi_k`
/// gives `q_k = xi_k` and `p_k = m x_(k mod n) + sigma xi_k`, so the mixture
/// components are stratified.
pub(crate) fn coupled_draws(
    schedule: &NoiseSchedule,
    cloud: &PointCloud,
    t: f64,
    count: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = cloud.dim();
    let m = schedule.mean_scale(t)?;
    let sd = schedule.variance(t)?.sqrt();
    let q = normal_draws(count, d, seed);
    let mut p = q.clone();
    for (k, row) in p.chunks_exact_mut(d).enumerate() {
        let x = cloud.point(k % cloud.len());
        for (v, xi) in row.iter_mut().zip(x) {
            *v = m * xi + sd * *v;
        }
    }
    Ok((p, q))
}

pub(crate) fn normal_draws(count: usize, dim: usize, seed: u64) -> Vec<f64> {
    rng::fill_chunked(seed, count, dim, |r, out| {
        for o in out.iter_mut() {
            *o = StandardNormal.sample(r);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let f = linear_fit(&x, &y);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept + 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_of_mean_matches_theory() {
        let data: Vec<f64> = (0..400).map(|k| (k % 20) as f64).collect();
        let n = data.len();
        let se = bootstrap_se(&[n], 400, 3, |idx| {
            idx[0].iter().map(|&i| data[i]).sum::<f64>() / n as f64
        });
        let m = data.iter().sum::<f64>() / n as f64;
        let sd = (data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        let theory = sd / (n as f64).sqrt();
        assert!((se / theory - 1.0).abs() < 0.15, "{se} vs {theory}");
    }
}

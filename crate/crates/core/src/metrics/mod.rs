//! Wasserstein-2 distances between empirical laws and L2 distances between
//! maps: the measurement layer for every experiment.

pub mod assignment;
pub mod line;
pub mod sinkhorn;
pub mod transport;

use serde::{Deserialize, Serialize};

use crate::cloud::sq_dist;
use crate::error::{Error, Result};

/// Largest `|a| * |b|` accepted by [`w2_exact`].
pub const EXACT_PAIR_LIMIT: usize = 4_000_000;
/// Marginal tolerance of the entropic solver.
pub const ENTROPIC_TOL: f64 = 1e-7;

/// Weighted point set. Points are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalLaw {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    uniform: bool,
}

impl EmpiricalLaw {
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        let n = Self::count(dim, &points)?;
        Ok(Self {
            dim,
            points,
            weights: vec![1.0 / n as f64; n],
            uniform: true,
        })
    }

    pub fn weighted(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let n = Self::count(dim, &points)?;
        if weights.len() != n {
            return Err(Error::Usage(format!("{} weights for {n} points", weights.len())));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Domain("weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("weights sum to {total}, not 1")));
        }
        Ok(Self {
            dim,
            points,
            weights,
            uniform: false,
        })
    }

    fn count(dim: usize, points: &[f64]) -> Result<usize> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::Usage("empirical law needs a nonempty dim-aligned buffer".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite point".into()));
        }
        Ok(points.len() / dim)
    }

    /// Merges exactly repeated points, summing their weights.
    pub fn deduplicated(&self) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&i, &j| {
            self.point(i)
                .iter()
                .zip(self.point(j))
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut points = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        let mut last: Option<usize> = None;
        for i in order {
            match last {
                Some(l) if self.point(l) == self.point(i) => {
                    *weights.last_mut().unwrap() += self.weights[i];
                }
                _ => {
                    points.extend_from_slice(self.point(i));
                    weights.push(self.weights[i]);
                    last = Some(i);
                }
            }
        }
        let uniform = self.uniform && weights.len() == self.len();
        Self {
            dim: self.dim,
            points,
            weights,
            uniform,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
    pub fn points(&self) -> &[f64] {
        &self.points
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Entropic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingResult {
    /// Squared W2, `sum mass * |x_i - y_j|^2`.
    pub cost: f64,
    pub plan: Vec<(usize, usize, f64)>,
    pub method: Method,
    pub iterations: usize,
    /// Marginal residual reached by the iteration before the final
    /// projection onto the exact marginals (0 for the exact solvers).
    pub tolerance: f64,
    pub converged: bool,
    /// Set for entropic results: the cost is not debiased and bounds the
    /// exact cost from above.
    pub upper_bound: bool,
}

impl CouplingResult {
    pub fn w2(&self) -> f64 {
        self.cost.max(0.0).sqrt()
    }
}

fn cost_matrix(a: &EmpiricalLaw, b: &EmpiricalLaw) -> Vec<f64> {
    let m = b.len();
    let mut c = vec![0.0; a.len() * m];
    use rayon::prelude::*;
    c.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let p = a.point(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = sq_dist(p, b.point(j));
        }
    });
    c
}

fn check_dims(a: &EmpiricalLaw, b: &EmpiricalLaw) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::Usage(format!("dimension mismatch: {} vs {}", a.dim, b.dim)));
    }
    Ok(())
}

/// Exact optimal coupling. One-dimensional laws use the monotone (sorted)
/// coupling, equal-size uniform laws go through assignment, everything else
/// through min-cost flow.
pub fn w2_exact(a: &EmpiricalLaw, b: &EmpiricalLaw) -> Result<CouplingResult> {
    check_dims(a, b)?;
    if a.dim == 1 {
        let plan = line::solve(&a.points, &a.weights, &b.points, &b.weights);
        let cost = plan
            .iter()
            .map(|&(i, j, w)| w * (a.points[i] - b.points[j]).powi(2))
            .sum();
        return Ok(CouplingResult {
            cost,
            plan,
            method: Method::Exact,
            iterations: 0,
            tolerance: 0.0,
            converged: true,
            upper_bound: false,
        });
    }
    let pairs = a.len() * b.len();
    if pairs > EXACT_PAIR_LIMIT {
        return Err(Error::Capacity {
            pairs,
            limit: EXACT_PAIR_LIMIT,
        });
    }
    let c = cost_matrix(a, b);
    let plan = if a.uniform && b.uniform && a.len() == b.len() {
        let n = a.len();
        let w = 1.0 / n as f64;
        assignment::solve(n, &c)
            .into_iter()
            .enumerate()
            .map(|(i, j)| (i, j, w))
            .collect()
    } else {
        transport::solve(&a.weights, &b.weights, &c)
    };
    let m = b.len();
    let cost = plan.iter().map(|&(i, j, w)| w * c[i * m + j]).sum();
    Ok(CouplingResult {
        cost,
        plan,
        method: Method::Exact,
        iterations: 0,
        tolerance: 0.0,
        converged: true,
        upper_bound: false,
    })
}

/// Entropic coupling at regularization `reg`; the reported cost is the
/// transport cost of the entropic plan.
pub fn w2_entropic(a: &EmpiricalLaw, b: &EmpiricalLaw, reg: f64, max_iters: usize) -> Result<CouplingResult> {
    check_dims(a, b)?;
    if !(reg > 0.0) || !reg.is_finite() {
        return Err(Error::Domain(format!("regularization must be positive, got {reg}")));
    }
    let c = cost_matrix(a, b);
    let out = sinkhorn::solve(&a.weights, &b.weights, &c, reg, ENTROPIC_TOL, max_iters);
    let m = b.len();
    let cost = out.plan.iter().zip(&c).map(|(p, c)| p * c).sum();
    let plan = out
        .plan
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(k, &p)| (k / m, k % m, p))
        .collect();
    Ok(CouplingResult {
        cost,
        plan,
        method: Method::Entropic,
        iterations: out.iterations,
        tolerance: out.dual_residual,
        converged: out.converged,
        upper_bound: true,
    })
}

/// Median of the pairwise squared distances, the natural unit for `reg`.
pub fn median_cost(a: &EmpiricalLaw, b: &EmpiricalLaw) -> f64 {
    let mut c = cost_matrix(a, b);
    c.sort_by(f64::total_cmp);
    c[c.len() / 2]
}

/// `sqrt(mean |f(x) - g(x)|^2)` over row-major samples.
pub fn map_l2<F, G>(f: F, g: G, mu_samples: &[f64], dim: usize) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let n = mu_samples.len() / dim;
    let s: f64 = mu_samples.chunks_exact(dim).map(|x| sq_dist(&f(x), &g(x))).sum();
    (s / n as f64).sqrt()
}

/// Same as [`map_l2`] for already evaluated outputs.
pub fn map_l2_outputs(out1: &[f64], out2: &[f64], dim: usize) -> Result<f64> {
    if out1.len() != out2.len() || !out1.len().is_multiple_of(dim) {
        return Err(Error::Usage("map outputs differ in length".into()));
    }
    Ok(crate::mixture::mean_sq_dist(out1, out2, dim).sqrt())
}

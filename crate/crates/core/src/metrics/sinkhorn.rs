//! Log-domain Sinkhorn scaling for entropic transport.

use crate::mixture::log_sum_exp;

/// Over-relaxation factor of the dual updates.
const OMEGA: f64 = 1.8;

pub struct SinkhornOutput {
    pub plan: Vec<f64>,
    pub iterations: usize,
    /// Marginal L1 error of the unrounded plan.
    pub dual_residual: f64,
    /// Marginal L1 error of the returned (rounded) plan.
    pub residual: f64,
    pub converged: bool,
}

fn marginal_error(plan: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let m = b.len();
    let rows: f64 = plan
        .chunks_exact(m)
        .zip(a)
        .map(|(r, ai)| (r.iter().sum::<f64>() - ai).abs())
        .sum();
    let cols: f64 = (0..m)
        .map(|j| (plan.chunks_exact(m).map(|r| r[j]).sum::<f64>() - b[j]).abs())
        .sum();
    rows + cols
}

/// Projects a near-feasible plan onto the coupling polytope: shrink rows and
/// columns that carry too much mass, then add the rank-one correction.
fn round_to_marginals(plan: &mut [f64], a: &[f64], b: &[f64]) {
    let m = b.len();
    for (row, ai) in plan.chunks_exact_mut(m).zip(a) {
        let s: f64 = row.iter().sum();
        if s > *ai {
            let k = ai / s;
            row.iter_mut().for_each(|v| *v *= k);
        }
    }
    for j in 0..m {
        let s: f64 = plan.chunks_exact(m).map(|r| r[j]).sum();
        if s > b[j] {
            let k = b[j] / s;
            plan.chunks_exact_mut(m).for_each(|r| r[j] *= k);
        }
    }
    let ea: Vec<f64> = plan
        .chunks_exact(m)
        .zip(a)
        .map(|(r, ai)| ai - r.iter().sum::<f64>())
        .collect();
    let eb: Vec<f64> = (0..m)
        .map(|j| b[j] - plan.chunks_exact(m).map(|r| r[j]).sum::<f64>())
        .collect();
    let total: f64 = ea.iter().sum();
    if total > 0.0 {
        for (row, x) in plan.chunks_exact_mut(m).zip(&ea) {
            for (v, y) in row.iter_mut().zip(&eb) {
                *v += x * y / total;
            }
        }
    }
}

/// Alternating dual updates until the row-marginal L1 error drops to `tol`.
/// The regularization is annealed down from the cost scale with warm-started
/// duals; `max_iters` bounds the total count over all stages.
pub fn solve(a: &[f64], b: &[f64], cost: &[f64], reg: f64, tol: f64, max_iters: usize) -> SinkhornOutput {
    let n = a.len();
    let m = b.len();
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut buf = vec![0.0; n.max(m)];
    let scale = cost.iter().cloned().fold(0.0, f64::max);
    let mut schedule = Vec::new();
    let mut r = reg;
    while r < scale {
        schedule.push(r);
        r *= 4.0;
    }
    schedule.reverse();
    let mut iterations = 0;
    for &stage in &schedule {
        sweep(
            &log_a,
            &log_b,
            a,
            cost,
            stage,
            tol.max(1e-3),
            max_iters / 4,
            &mut f,
            &mut g,
            &mut buf,
            &mut iterations,
        );
    }
    let budget = max_iters.saturating_sub(iterations);
    sweep(
        &log_a,
        &log_b,
        a,
        cost,
        reg,
        tol,
        budget,
        &mut f,
        &mut g,
        &mut buf,
        &mut iterations,
    );
    let mut plan = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            plan[i * m + j] = (log_a[i] + log_b[j] + (f[i] + g[j] - cost[i * m + j]) / reg).exp();
        }
    }
    let raw = marginal_error(&plan, a, b);
    round_to_marginals(&mut plan, a, b);
    let residual = marginal_error(&plan, a, b);
    SinkhornOutput {
        plan,
        iterations,
        dual_residual: raw,
        residual,
        converged: raw <= tol,
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    log_a: &[f64],
    log_b: &[f64],
    a: &[f64],
    cost: &[f64],
    reg: f64,
    tol: f64,
    max_iters: usize,
    f: &mut [f64],
    g: &mut [f64],
    buf: &mut [f64],
    total: &mut usize,
) -> f64 {
    let n = f.len();
    let m = g.len();
    let mut residual = f64::INFINITY;
    let mut colsum = vec![0.0; m];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        for i in 0..n {
            for j in 0..m {
                buf[j] = (g[j] - cost[i * m + j]) / reg + log_b[j];
            }
            f[i] = (1.0 - OMEGA) * f[i] - OMEGA * reg * log_sum_exp(&buf[..m]);
        }
        for j in 0..m {
            for i in 0..n {
                buf[i] = (f[i] - cost[i * m + j]) / reg + log_a[i];
            }
            g[j] = (1.0 - OMEGA) * g[j] - OMEGA * reg * log_sum_exp(&buf[..n]);
        }
        residual = 0.0;
        colsum.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..m {
                let p = (log_a[i] + log_b[j] + (f[i] + g[j] - cost[i * m + j]) / reg).exp();
                row += p;
                colsum[j] += p;
            }
            residual += (row - a[i]).abs();
        }
        residual += colsum
            .iter()
            .zip(log_b)
            .map(|(c, lb)| (c - lb.exp()).abs())
            .sum::<f64>();
        if residual <= tol {
            break;
        }
    }
    *total += iterations;
    residual
}

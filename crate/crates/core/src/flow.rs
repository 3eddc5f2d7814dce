//! Probability-flow transport maps `M^{s,t}` between marginals of the VP
//! diffusion, with optional controlled score perturbations.
//!
//! Integration is classical fourth-order Runge-Kutta with a fixed number of
//! steps, uniform in `lambda = ln(sigma / m)`. In that variable the flow reads
//! `dx/dlambda = -sigma^2 (x + S(x, t))`, which for the exact score becomes
//! `m^2 x - m E[x_0 | x]` and stays well conditioned down to `eps`.

use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{fmt_f64, PointCloud};
use crate::error::{Error, Result};
use crate::mixture::{log_sum_exp, marginal, MixtureMarginal};
use crate::rng;
use crate::schedule::{IntegratingFactors, NoiseSchedule};

/// Default number of RK4 steps.
pub const DEFAULT_STEPS: usize = 512;
/// Uniform time panels in the score-matching quadrature.
pub const LOSS_PANELS: usize = 64;
const LOSS_SUBPANELS: usize = 32;
/// Frequencies in the smooth perturbation field.
const FIELD_MODES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationMode {
    ConstantVector,
    SmoothField,
}

/// A fixed error field `delta * e(x, t)` added to the exact score.
///
/// `e` has unit sup-norm and is fully determined by `(mode, seed, dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePerturbation {
    pub magnitude: f64,
    pub mode: PerturbationMode,
    pub seed: u64,
    #[serde(skip)]
    field: Option<Arc<Field>>,
}

#[derive(Debug, PartialEq)]
struct Field {
    dim: usize,
    direction: Vec<f64>,
    // per output component: FIELD_MODES wave vectors, phases, time rates
    waves: Vec<Vec<(Vec<f64>, f64, f64)>>,
}

impl ScorePerturbation {
    pub fn new(magnitude: f64, mode: PerturbationMode, seed: u64) -> Result<Self> {
        if !(magnitude >= 0.0) || !magnitude.is_finite() {
            return Err(Error::Domain(format!(
                "perturbation magnitude {magnitude} must be >= 0"
            )));
        }
        Ok(Self {
            magnitude,
            mode,
            seed,
            field: None,
        })
    }

    fn field(&self, dim: usize) -> Arc<Field> {
        if let Some(f) = &self.field {
            if f.dim == dim {
                return f.clone();
            }
        }
        Arc::new(Field::build(dim, self.seed))
    }

    fn bind(&mut self, dim: usize) {
        self.field = Some(Arc::new(Field::build(dim, self.seed)));
    }

    /// Writes `e(x, t)` into `out`.
    pub fn unit_field(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let f = self.field(x.len());
        f.eval(self.mode, x, t, out);
    }

    /// Upper bound on the spatial Lipschitz constant of `delta * e`.
    pub fn lipschitz(&self, dim: usize) -> f64 {
        match self.mode {
            PerturbationMode::ConstantVector => 0.0,
            PerturbationMode::SmoothField => {
                let f = self.field(dim);
                let s: f64 = f
                    .waves
                    .iter()
                    .map(|modes| {
                        let l: f64 = modes
                            .iter()
                            .map(|(w, _, _)| w.iter().map(|v| v * v).sum::<f64>().sqrt())
                            .sum();
                        (l / FIELD_MODES as f64).powi(2)
                    })
                    .sum();
                self.magnitude * (s / dim as f64).sqrt()
            }
        }
    }
}

impl Field {
    fn build(dim: usize, seed: u64) -> Self {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(rng::derive(seed, 0xF1E1D));
        let mut direction: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        direction.iter_mut().for_each(|v| *v /= norm);
        let waves = (0..dim)
            .map(|_| {
                (0..FIELD_MODES)
                    .map(|_| {
                        let w: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
                        let phase = rand::Rng::random_range(&mut r, 0.0..std::f64::consts::TAU);
                        let rate: f64 = StandardNormal.sample(&mut r);
                        (w, phase, rate)
                    })
                    .collect()
            })
            .collect();
        Self { dim, direction, waves }
    }

    fn eval(&self, mode: PerturbationMode, x: &[f64], t: f64, out: &mut [f64]) {
        match mode {
            PerturbationMode::ConstantVector => out.copy_from_slice(&self.direction),
            PerturbationMode::SmoothField => {
                // Each component is an average of cosines, bounded by 1; the
                // 1/sqrt(n) factor caps the Euclidean norm at 1.
                let scale = 1.0 / (self.dim as f64).sqrt();
                for (o, modes) in out.iter_mut().zip(&self.waves) {
                    let s: f64 = modes
                        .iter()
                        .map(|(w, ph, rate)| {
                            let arg: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                            (arg + ph + rate * t).cos()
                        })
                        .sum();
                    *o = scale * s / FIELD_MODES as f64;
                }
            }
        }
    }
}

/// The map `M^{t_start, t_end}` of the (possibly perturbed) probability flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMap {
    pub schedule: NoiseSchedule,
    pub cloud: Arc<PointCloud>,
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
    pub perturbation: Option<ScorePerturbation>,
}

impl FlowMap {
    pub fn new(
        schedule: NoiseSchedule,
        cloud: Arc<PointCloud>,
        t_start: f64,
        t_end: f64,
        steps: usize,
    ) -> Result<Self> {
        let map = Self {
            schedule,
            cloud,
            t_start,
            t_end,
            steps,
            perturbation: None,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn with_perturbation(mut self, mut p: ScorePerturbation) -> Self {
        p.bind(self.cloud.dim());
        self.perturbation = Some(p);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        for t in [self.t_start, self.t_end] {
            if !(t >= s.eps * (1.0 - 1e-12) && t <= s.t_max * (1.0 + 1e-12)) {
                return Err(Error::Domain(format!(
                    "flow endpoint {t} outside [{}, {}]",
                    s.eps, s.t_max
                )));
            }
        }
        if self.steps == 0 {
            return Err(Error::Usage("flow needs at least one step".into()));
        }
        Ok(())
    }

    /// Reverses the direction, keeping everything else.
    pub fn inverse(&self) -> Self {
        Self {
            t_start: self.t_end,
            t_end: self.t_start,
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.cloud.dim()
    }

    fn lambda_grid(&self) -> Result<(f64, f64)> {
        let a = self.schedule.half_log_inv_snr(self.t_start)?;
        let b = self.schedule.half_log_inv_snr(self.t_end)?;
        Ok((a, (b - a) / self.steps as f64))
    }

    fn rhs(&self, lambda: f64, x: &[f64], out: &mut [f64], scratch: &mut InnerScratch) {
        // sigma^2 = logistic(2 lambda), m^2 = logistic(-2 lambda)
        let var = 1.0 / (1.0 + (-2.0 * lambda).exp());
        let m = (1.0 / (1.0 + (2.0 * lambda).exp())).sqrt();
        let t = self.schedule.time_at_half_log_inv_snr(lambda);
        let p = MixtureMarginal::from_parts(self.cloud.clone(), t, m, var).expect("positive variance on the flow grid");
        p.score_into(x, out, &mut scratch.resp);
        if let Some(pert) = &self.perturbation {
            if pert.magnitude > 0.0 {
                pert.unit_field(x, t, &mut scratch.field);
                for (o, e) in out.iter_mut().zip(&scratch.field) {
                    *o += pert.magnitude * e;
                }
            }
        }
        for (o, xi) in out.iter_mut().zip(x) {
            *o = -var * (xi + *o);
        }
    }

    pub fn transport(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = x.to_vec();
        self.transport_in_place(&mut out, &mut Scratch::new(x.len()), None)?;
        Ok(out)
    }

    fn transport_in_place(
        &self,
        x: &mut [f64],
        s: &mut Scratch,
        mut trace: Option<&mut Vec<(f64, Vec<f64>)>>,
    ) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Usage(format!(
                "point of dimension {} for a {}-dimensional flow",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite initial state".into()));
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push((self.t_start, x.to_vec()));
        }
        if self.t_start == self.t_end {
            return Ok(());
        }
        let (l0, h) = self.lambda_grid()?;
        let n = x.len();
        for step in 0..self.steps {
            let l = l0 + step as f64 * h;
            let Scratch {
                k1,
                k2,
                k3,
                k4,
                tmp,
                inner,
            } = &mut *s;
            self.rhs(l, x, k1, inner);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            self.rhs(l + 0.5 * h, tmp, k2, inner);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            self.rhs(l + 0.5 * h, tmp, k3, inner);
            for i in 0..n {
                tmp[i] = x[i] + h * k3[i];
            }
            self.rhs(l + h, tmp, k4, inner);
            for i in 0..n {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    step: step + 1,
                    t: self.schedule.time_at_half_log_inv_snr(l + h),
                });
            }
            if let Some(tr) = trace.as_deref_mut() {
                let t = if step + 1 == self.steps {
                    self.t_end
                } else {
                    self.schedule.time_at_half_log_inv_snr(l + h)
                };
                tr.push((t, x.to_vec()));
            }
        }
        Ok(())
    }

    /// Transports a flat row-major batch; points are independent, so the
    /// result does not depend on how work is split.
    pub fn transport_batch(&self, points: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if !points.len().is_multiple_of(d) {
            return Err(Error::Usage("batch length is not a multiple of dim".into()));
        }
        let mut out = points.to_vec();
        out.par_chunks_mut(d * 64).try_for_each(|block| {
            let mut s = Scratch::new(d);
            block
                .chunks_exact_mut(d)
                .try_for_each(|x| self.transport_in_place(x, &mut s, None))
        })?;
        Ok(out)
    }

    /// States at every grid time, including both endpoints.
    pub fn trajectory(&self, x: &[f64]) -> Result<Vec<(f64, Vec<f64>)>> {
        let mut out = x.to_vec();
        let mut trace = Vec::with_capacity(self.steps + 1);
        self.transport_in_place(&mut out, &mut Scratch::new(x.len()), Some(&mut trace))?;
        Ok(trace)
    }
}

struct Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
    inner: InnerScratch,
}

struct InnerScratch {
    resp: Vec<f64>,
    field: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self {
            k1: vec![0.0; d],
            k2: vec![0.0; d],
            k3: vec![0.0; d],
            k4: vec![0.0; d],
            tmp: vec![0.0; d],
            inner: InnerScratch {
                resp: Vec::new(),
                field: vec![0.0; d],
            },
        }
    }
}

/// Writes trajectories as CSV (`t,x0,..`), one block per particle separated
/// by a blank line.
pub fn write_trajectories<W: Write>(mut w: W, dim: usize, trajectories: &[Vec<(f64, Vec<f64>)>]) -> Result<()> {
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((0..dim).map(|k| format!("x{k}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (b, tr) in trajectories.iter().enumerate() {
        if b > 0 {
            writeln!(w)?;
        }
        for (t, x) in tr {
            let row: Vec<String> = std::iter::once(fmt_f64(*t))
                .chain(x.iter().map(|v| fmt_f64(*v)))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// Score-matching loss, kept in log form because `phi = g^4 I^2` overflows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatchingLoss {
    pub log_value: f64,
}

impl ScoreMatchingLoss {
    pub fn value(&self) -> f64 {
        self.log_value.exp()
    }
}

/// `ln int_a^b phi(t) dt`, with `ln phi` interpolated linearly on a fine grid
/// and the exponential integrated exactly on each piece.
pub fn log_weight_integral(factors: &IntegratingFactors, a: f64, b: f64, pieces: usize) -> Result<f64> {
    let pieces = pieces.max(1);
    let h = (b - a) / pieces as f64;
    let mut terms = Vec::with_capacity(pieces);
    let mut prev = factors.log_weight(a)?;
    for k in 1..=pieces {
        let t = if k == pieces { b } else { a + k as f64 * h };
        let cur = factors.log_weight(t)?;
        let (lo, hi) = if cur >= prev { (prev, cur) } else { (cur, prev) };
        let d = hi - lo;
        // int exp(linear) = h * (e^hi - e^lo) / d
        let log_factor = if d < 1e-12 { 0.0 } else { (-(-d).exp_m1() / d).ln() };
        terms.push(h.ln() + hi + log_factor);
        prev = cur;
    }
    Ok(log_sum_exp(&terms))
}

/// Monte Carlo estimate of `1/2 int_lo^hi phi(t) E_{p_t} |S - grad log p_t|^2 dt`
/// for the perturbed score of `map`, with `phi = g^4 I^2` from `factors`.
///
/// Each of the [`LOSS_PANELS`] uniform panels uses `mc_samples` draws from the
/// exact marginal at its midpoint; the weight is integrated per panel.
pub fn score_matching_loss(
    map: &FlowMap,
    factors: &IntegratingFactors,
    t_lo: f64,
    t_hi: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<ScoreMatchingLoss> {
    let s = &map.schedule;
    if !(t_lo < t_hi) || t_lo < s.eps * (1.0 - 1e-12) || t_hi > s.t_max * (1.0 + 1e-12) {
        return Err(Error::Domain(format!(
            "loss interval [{t_lo}, {t_hi}] not inside [{}, {}]",
            s.eps, s.t_max
        )));
    }
    if mc_samples == 0 {
        return Err(Error::Usage("mc_samples must be >= 1".into()));
    }
    let Some(pert) = map.perturbation.as_ref().filter(|p| p.magnitude > 0.0) else {
        return Ok(ScoreMatchingLoss {
            log_value: f64::NEG_INFINITY,
        });
    };
    let d = map.dim();
    let width = (t_hi - t_lo) / LOSS_PANELS as f64;
    let mut terms = Vec::with_capacity(LOSS_PANELS);
    for k in 0..LOSS_PANELS {
        let a = t_lo + k as f64 * width;
        let b = if k + 1 == LOSS_PANELS { t_hi } else { a + width };
        let mid = 0.5 * (a + b);
        let mean_err = match pert.mode {
            PerturbationMode::ConstantVector => pert.magnitude * pert.magnitude,
            PerturbationMode::SmoothField => {
                let p = marginal(s, map.cloud.clone(), mid)?;
                let xs = p.sample(mc_samples, rng::derive(seed, k as u64));
                let mut e = vec![0.0; d];
                let acc: f64 = xs
                    .chunks_exact(d)
                    .map(|x| {
                        pert.unit_field(x, mid, &mut e);
                        e.iter().map(|v| v * v).sum::<f64>()
                    })
                    .sum();
                pert.magnitude * pert.magnitude * acc / mc_samples as f64
            }
        };
        if mean_err > 0.0 {
            terms.push(log_weight_integral(factors, a, b, LOSS_SUBPANELS)? + mean_err.ln());
        }
    }
    Ok(ScoreMatchingLoss {
        log_value: 0.5f64.ln() + log_sum_exp(&terms),
    })
}

/// Root-mean-square distance between two maps on shared initial samples.
pub fn map_deviation(exact: &FlowMap, perturbed: &FlowMap, init_samples: &[f64]) -> Result<f64> {
    if exact.t_start != perturbed.t_start || exact.t_end != perturbed.t_end {
        return Err(Error::Usage(format!(
            "endpoint mismatch: [{}, {}] vs [{}, {}]",
            exact.t_start, exact.t_end, perturbed.t_start, perturbed.t_end
        )));
    }
    if exact.dim() != perturbed.dim() {
        return Err(Error::Usage("maps differ in dimension".into()));
    }
    let d = exact.dim();
    let a = exact.transport_batch(init_samples)?;
    let b = perturbed.transport_batch(init_samples)?;
    Ok(crate::mixture::mean_sq_dist(&a, &b, d).sqrt())
}

/// Right-hand side of the transport-map bound,
/// `sqrt((T - eps) / (2 I(eps)^2)) * J^{1/2}`, in log form.
pub fn log_map_bound(factors: &IntegratingFactors, eps: f64, horizon: f64, loss: ScoreMatchingLoss) -> Result<f64> {
    Ok(0.5 * ((horizon - eps) / 2.0).ln() - factors.log_i(eps)? + 0.5 * loss.log_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::LipschitzBound;
    use approx::assert_relative_eq;

    fn two_cluster() -> Arc<PointCloud> {
        Arc::new(
            PointCloud::from_rows(
                &[
                    vec![1.6, 0.9],
                    vec![2.2, 1.0],
                    vec![1.9, 1.5],
                    vec![2.5, 1.4],
                    vec![-1.7, -0.8],
                    vec![-2.3, -1.1],
                    vec![-1.9, -1.5],
                    vec![-2.4, -0.6],
                ],
                None,
            )
            .unwrap(),
        )
    }

    #[test]
    fn equal_endpoints_are_identity() {
        let s = NoiseSchedule::default();
        let m = FlowMap::new(s, two_cluster(), 0.4, 0.4, 16).unwrap();
        assert_eq!(m.transport(&[0.3, -0.2]).unwrap(), vec![0.3, -0.2]);
    }

    #[test]
    fn endpoint_validation() {
        let s = NoiseSchedule::default();
        assert!(FlowMap::new(s, two_cluster(), 0.0, 1.0, 16).is_err());
        assert!(FlowMap::new(s, two_cluster(), 0.5, 1.2, 16).is_err());
        assert!(FlowMap::new(s, two_cluster(), 0.5, 1.0, 0).is_err());
    }

    #[test]
    fn single_point_matches_closed_form() {
        // x(t) = x(T) sigma(t) / sigma(T) for a point mass at the origin.
        let s = NoiseSchedule::default();
        let cloud = Arc::new(PointCloud::new(1, vec![0.0], None).unwrap());
        let m = FlowMap::new(s, cloud, 1.0, s.eps, 256).unwrap();
        let x = 1.7;
        let got = m.transport(&[x]).unwrap()[0];
        let expect = x * (s.variance(s.eps).unwrap() / s.variance(1.0).unwrap()).sqrt();
        assert_relative_eq!(got, expect, max_relative = 1e-6);
    }

    #[test]
    fn reverse_then_forward_is_identity() {
        let s = NoiseSchedule::default();
        let back = FlowMap::new(s, two_cluster(), 1.0, s.eps, 512).unwrap();
        let fwd = back.inverse();
        let p = marginal(&s, two_cluster(), 1.0).unwrap();
        let xs = p.sample(200, 1);
        let there = back.transport_batch(&xs).unwrap();
        let home = fwd.transport_batch(&there).unwrap();
        let rms = crate::mixture::mean_sq_dist(&xs, &home, 2).sqrt();
        assert!(rms <= 1e-4, "rms {rms}");
    }

    #[test]
    fn batch_matches_single() {
        let s = NoiseSchedule::default();
        let m = FlowMap::new(s, two_cluster(), 0.8, 0.05, 64).unwrap();
        let xs = marginal(&s, two_cluster(), 0.8).unwrap().sample(130, 2);
        let batch = m.transport_batch(&xs).unwrap();
        for (x, y) in xs.chunks(2).zip(batch.chunks(2)) {
            assert_eq!(m.transport(x).unwrap(), y);
        }
    }

    #[test]
    fn trajectory_endpoints() {
        let s = NoiseSchedule::default();
        let m = FlowMap::new(s, two_cluster(), 1.0, 0.1, 8).unwrap();
        let tr = m.trajectory(&[0.1, 0.2]).unwrap();
        assert_eq!(tr.len(), 9);
        assert_eq!(tr[0].0, 1.0);
        assert_eq!(tr[8].0, 0.1);
        assert_eq!(tr[8].1, m.transport(&[0.1, 0.2]).unwrap());
        let mut buf = Vec::new();
        write_trajectories(&mut buf, 2, &[tr.clone(), tr]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x0,x1\n"));
        assert_eq!(text.lines().filter(|l| l.is_empty()).count(), 1);
    }

    #[test]
    fn zero_perturbation_is_bit_identical() {
        let s = NoiseSchedule::default();
        let exact = FlowMap::new(s, two_cluster(), 1.0, s.eps, 64).unwrap();
        let pert = exact
            .clone()
            .with_perturbation(ScorePerturbation::new(0.0, PerturbationMode::SmoothField, 3).unwrap());
        let xs = marginal(&s, two_cluster(), 1.0).unwrap().sample(50, 4);
        assert_eq!(exact.transport_batch(&xs).unwrap(), pert.transport_batch(&xs).unwrap());
        assert_eq!(map_deviation(&exact, &pert, &xs).unwrap(), 0.0);
        let f = IntegratingFactors::with_default_bound(s).unwrap();
        assert_eq!(score_matching_loss(&pert, &f, s.eps, 1.0, 10, 0).unwrap().value(), 0.0);
    }

    #[test]
    fn smooth_field_has_unit_sup_norm() {
        let p = ScorePerturbation::new(1.0, PerturbationMode::SmoothField, 9).unwrap();
        let mut e = vec![0.0; 2];
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = [
                rand::Rng::random_range(&mut r, -5.0..5.0),
                rand::Rng::random_range(&mut r, -5.0..5.0),
            ];
            p.unit_field(&x, 0.3, &mut e);
            assert!(e.iter().map(|v| v * v).sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn constant_perturbation_loss_is_separable() {
        let s = NoiseSchedule::default();
        let f = IntegratingFactors::new(s, LipschitzBound::Constant(2.0));
        let delta = 0.03;
        let map = FlowMap::new(s, two_cluster(), 1.0, s.eps, 16)
            .unwrap()
            .with_perturbation(ScorePerturbation::new(delta, PerturbationMode::ConstantVector, 1).unwrap());
        let loss = score_matching_loss(&map, &f, s.eps, 1.0, 8, 0).unwrap().value();
        // Oracle: fine composite Simpson of phi = beta^2 I^2 with I in closed
        // form for constant L: ln I = (1 + L)/2 * B(t).
        let phi = |t: f64| {
            let b = s.beta(t);
            b * b * (1.5 * s.cumulative_beta(t) * 2.0).exp()
        };
        let integral = crate::schedule::simpson(phi, s.eps, 1.0, 200_000);
        assert_relative_eq!(loss, 0.5 * delta * delta * integral, max_relative = 1e-6);
    }

    #[test]
    fn loss_scales_quadratically() {
        let s = NoiseSchedule::default();
        let f = IntegratingFactors::new(s, LipschitzBound::Constant(1.0));
        let base = FlowMap::new(s, two_cluster(), 1.0, s.eps, 16).unwrap();
        let loss = |d: f64| {
            let m = base
                .clone()
                .with_perturbation(ScorePerturbation::new(d, PerturbationMode::SmoothField, 5).unwrap());
            score_matching_loss(&m, &f, s.eps, 1.0, 256, 77).unwrap().value()
        };
        let ratio = loss(0.02) / loss(0.01);
        assert!((ratio - 4.0).abs() <= 0.04, "ratio {ratio}");
    }

    #[test]
    fn deviation_endpoint_mismatch_is_usage_error() {
        let s = NoiseSchedule::default();
        let a = FlowMap::new(s, two_cluster(), 1.0, 0.1, 8).unwrap();
        let b = FlowMap::new(s, two_cluster(), 1.0, 0.2, 8).unwrap();
        assert!(matches!(map_deviation(&a, &b, &[0.0, 0.0]), Err(Error::Usage(_))));
    }

    fn deviation_for(delta: f64, xs: &[f64], t_end: f64) -> f64 {
        let s = NoiseSchedule::default();
        let exact = FlowMap::new(s, two_cluster(), 1.0, t_end, 256).unwrap();
        let pert = exact
            .clone()
            .with_perturbation(ScorePerturbation::new(delta, PerturbationMode::SmoothField, 12).unwrap());
        map_deviation(&exact, &pert, xs).unwrap()
    }

    #[test]
    fn deviation_grows_with_delta() {
        let s = NoiseSchedule::default();
        let xs = marginal(&s, two_cluster(), 1.0).unwrap().sample(200, 8);
        let devs: Vec<f64> = [0.01, 0.02, 0.04]
            .iter()
            .map(|&d| deviation_for(d, &xs, s.eps))
            .collect();
        assert!(devs[0] <= devs[1] && devs[1] <= devs[2], "{devs:?}");
    }

    /// RMS of the first-order response `dx/ddelta`, from the variational
    /// equation `dy/dlambda = (m^2 Id - m^2 Cov_r / sigma^2) y - sigma^2 e`
    /// integrated next to the exact trajectory.
    fn tangent_rms(
        cloud: &PointCloud,
        xs: &[f64],
        t_start: f64,
        t_end: f64,
        steps: usize,
        pert: &ScorePerturbation,
    ) -> f64 {
        let s = NoiseSchedule::default();
        let d = cloud.dim();
        let l0 = s.half_log_inv_snr(t_start).unwrap();
        let h = (s.half_log_inv_snr(t_end).unwrap() - l0) / steps as f64;
        let rhs = |lam: f64, z: &[f64]| -> Vec<f64> {
            let var = 1.0 / (1.0 + (-2.0 * lam).exp());
            let m2 = 1.0 - var;
            let m = m2.sqrt();
            let t = s.time_at_half_log_inv_snr(lam);
            let (x, y) = z.split_at(d);
            let logits: Vec<f64> = cloud
                .points()
                .map(|p| -p.iter().zip(x).map(|(a, b)| (b - m * a).powi(2)).sum::<f64>() / (2.0 * var))
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z_sum: f64 = w.iter().sum();
            let mut mean = vec![0.0; d];
            for (wi, p) in w.iter().zip(cloud.points()) {
                for k in 0..d {
                    mean[k] += wi / z_sum * p[k];
                }
            }
            let mut cov_y = vec![0.0; d];
            for (wi, p) in w.iter().zip(cloud.points()) {
                let proj: f64 = (0..d).map(|k| (p[k] - mean[k]) * y[k]).sum();
                for k in 0..d {
                    cov_y[k] += wi / z_sum * (p[k] - mean[k]) * proj;
                }
            }
            let mut e = vec![0.0; d];
            pert.unit_field(x, t, &mut e);
            let mut out = vec![0.0; 2 * d];
            for k in 0..d {
                out[k] = m2 * x[k] - m * mean[k];
                out[d + k] = m2 * y[k] - m2 * cov_y[k] / var - var * e[k];
            }
            out
        };
        let mut acc = 0.0;
        for x in xs.chunks(d) {
            let mut z: Vec<f64> = x.iter().cloned().chain(std::iter::repeat_n(0.0, d)).collect();
            for k in 0..steps {
                let l = l0 + k as f64 * h;
                let k1 = rhs(l, &z);
                let a: Vec<f64> = z.iter().zip(&k1).map(|(u, v)| u + 0.5 * h * v).collect();
                let k2 = rhs(l + 0.5 * h, &a);
                let b: Vec<f64> = z.iter().zip(&k2).map(|(u, v)| u + 0.5 * h * v).collect();
                let k3 = rhs(l + 0.5 * h, &b);
                let c: Vec<f64> = z.iter().zip(&k3).map(|(u, v)| u + h * v).collect();
                let k4 = rhs(l + h, &c);
                for i in 0..z.len() {
                    z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
            acc += z[d..].iter().map(|v| v * v).sum::<f64>();
        }
        (acc / (xs.len() / d) as f64).sqrt()
    }

    #[test]
    fn deviation_is_linear_while_the_map_is_smooth() {
        // Down to t = 0.3 the marginal is still unimodal at the scale of the
        // clusters, so the flow map is smooth and first-order response holds.
        let s = NoiseSchedule::default();
        let xs = marginal(&s, two_cluster(), 1.0).unwrap().sample(100, 21);
        let pert = ScorePerturbation::new(1.0, PerturbationMode::SmoothField, 12).unwrap();
        let slope = tangent_rms(&two_cluster(), &xs, 1.0, 0.3, 256, &pert);
        for &delta in &[0.0025, 0.005, 0.01] {
            let dev = deviation_for(delta, &xs, 0.3);
            let r = dev / deviation_for(2.0 * delta, &xs, 0.3);
            assert!((0.4..=0.6).contains(&r), "delta {delta}: ratio {r}");
            assert_relative_eq!(dev, delta * slope, max_relative = 0.05);
        }
    }

    #[test]
    fn rk4_step_halving() {
        let s = NoiseSchedule::default();
        let xs = marginal(&s, two_cluster(), 1.0).unwrap().sample(100, 3);
        let run = |n| {
            FlowMap::new(s, two_cluster(), 1.0, s.eps, n)
                .unwrap()
                .transport_batch(&xs)
                .unwrap()
        };
        let (a, b, c) = (run(256), run(512), run(1024));
        let e1 = crate::mixture::mean_sq_dist(&a, &b, 2).sqrt();
        let e2 = crate::mixture::mean_sq_dist(&b, &c, 2).sqrt();
        assert!(e1 / e2 >= 8.0, "{e1} / {e2}");
    }
}

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::stats::{bootstrap_se, gather, normal_draws, w2_flat, BOOTSTRAP_REPS};
use super::{Check, ExperimentReport};
use crate::cloud::PointCloud;
use crate::error::Result;
use crate::flow::{FlowMap, DEFAULT_STEPS};
use crate::latent::{build_complex, sample_unconditional, DEFAULT_ANGLE_THRESHOLD};
use crate::metrics::{w2_exact, EmpiricalLaw};
use crate::mixture::marginal;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::sdot::{fit, pushforward, BrenierPotential, FitOptions, SourceLaw, DEFAULT_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub t_prime: f64,
    /// Number of `p_{T'}` draws used as semi-discrete targets.
    pub targets: usize,
    pub tol: f64,
    pub mc_samples: Option<usize>,
    pub max_iters: usize,
    pub angle_threshold: f64,
    /// Draws used to estimate the pushforward law's cell weights.
    pub pushforward_samples: usize,
    /// Sample size of every W2 comparison.
    pub samples: usize,
    pub steps: usize,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            t_prime: 0.1,
            targets: 64,
            tol: DEFAULT_TOL,
            mc_samples: None,
            max_iters: crate::sdot::DEFAULT_MAX_ITERS,
            angle_threshold: DEFAULT_ANGLE_THRESHOLD,
            pushforward_samples: 1 << 18,
            samples: 512,
            steps: DEFAULT_STEPS,
            bootstrap: BOOTSTRAP_REPS,
            seed: 0,
        }
    }
}

/// `count` draws of `p_t`, cycling through the mixture components; each
/// draw inherits the label of its component.
pub fn marginal_targets(
    schedule: &NoiseSchedule,
    cloud: &PointCloud,
    t: f64,
    count: usize,
    seed: u64,
) -> Result<Arc<PointCloud>> {
    let d = cloud.dim();
    let m = schedule.mean_scale(t)?;
    let sd = schedule.variance(t)?.sqrt();
    let mut data = normal_draws(count, d, seed);
    for (k, row) in data.chunks_exact_mut(d).enumerate() {
        for (v, x) in row.iter_mut().zip(cloud.point(k % cloud.len())) {
            *v = m * x + sd * *v;
        }
    }
    let labels = cloud.labels().map(|l| (0..count).map(|k| l[k % l.len()]).collect());
    Ok(Arc::new(PointCloud::new(d, data, labels)?))
}

/// W2 between `sum_i w_i delta_{y_i}` (weights from assignment counts) and
/// the uniform law on the targets.
fn pushforward_w2(potential: &BrenierPotential, indices: &[usize]) -> Result<f64> {
    let n = potential.len();
    let mut counts = vec![0usize; n];
    for &i in indices {
        counts[i] += 1;
    }
    let total = indices.len() as f64;
    let mut w: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    let y = potential.targets().as_flat().to_vec();
    let a = EmpiricalLaw::weighted(potential.dim(), y.clone(), w)?;
    let b = EmpiricalLaw::uniform(potential.dim(), y)?;
    Ok(w2_exact(&a, &b)?.w2())
}

/// End to end: fitted OT prior at `T'`, barycentric latent sampling, exact
/// flow to `eps`; compared against the Gaussian prior fed into the same flow.
pub fn verify_pipeline(
    cloud: Arc<PointCloud>,
    schedule: &NoiseSchedule,
    cfg: &PipelineConfig,
) -> Result<ExperimentReport> {
    let started = Instant::now();
    let snap = serde_json::json!({
        "cloud": { "dim": cloud.dim(), "points": cloud.len() },
        "schedule": schedule,
        "params": cfg,
    });
    let mut rep = ExperimentReport::new("pipeline", snap, cfg.seed);
    let d = cloud.dim();
    let n = cfg.samples;
    let t = cfg.t_prime;
    let eps = schedule.eps;

    let targets = marginal_targets(schedule, &cloud, t, cfg.targets, rng::derive(cfg.seed, 0))?;
    let opts = FitOptions {
        tol: cfg.tol,
        mc_samples: cfg.mc_samples,
        max_iters: cfg.max_iters,
        eta0: None,
        seed: rng::derive(cfg.seed, 1),
    };
    let (potential, stats) = fit(targets.clone(), SourceLaw::StandardNormal { dim: d }, &opts)?;
    rep.record("fit", potential.report());
    let complex = build_complex(&potential, &stats, cfg.angle_threshold)?;
    rep.record("components", complex.components.len());
    rep.record("simplices", complex.simplices.len());

    // Prior error at T'.
    let push = pushforward(&potential, cfg.pushforward_samples, rng::derive(cfg.seed, 2));
    let ot_prior = pushforward_w2(&potential, &push.indices)?;
    let ot_se = bootstrap_se(&[push.indices.len()], cfg.bootstrap, rng::derive(cfg.seed, 3), |idx| {
        let picked: Vec<usize> = idx[0].iter().map(|&k| push.indices[k]).collect();
        pushforward_w2(&potential, &picked).unwrap_or(f64::NAN)
    });
    let diam = targets.diameter();
    rep.check(Check::at_most(
        "ot_prior_error",
        "W2(pushforward, targets) <= 2 tol diam(targets)",
        ot_prior,
        2.0 * cfg.tol * diam,
        3.0 * ot_se,
    ));

    let p_tp = marginal(schedule, cloud.clone(), t)?.sample(n, rng::derive(cfg.seed, 4));
    let gauss = normal_draws(n, d, rng::derive(cfg.seed, 5));
    let gauss_prior = w2_flat(&gauss, &p_tp, d)?;
    let gauss_se = bootstrap_se(&[n, n], cfg.bootstrap, rng::derive(cfg.seed, 6), |idx| {
        w2_flat(&gather(&gauss, d, &idx[0]), &gather(&p_tp, d, &idx[1]), d).unwrap_or(f64::NAN)
    });
    rep.check(Check::at_least(
        "gaussian_prior_error",
        "W2(p_inf, p_T') >= 10 W2(pushforward, targets)",
        gauss_prior,
        10.0 * ot_prior,
        3.0 * (gauss_se * gauss_se + 100.0 * ot_se * ot_se).sqrt(),
    ));
    rep.record(
        "prior_error",
        serde_json::json!({
            "ot": ot_prior,
            "ot_se": ot_se,
            "gaussian": gauss_prior,
            "gaussian_se": gauss_se,
            "bound": 2.0 * cfg.tol * diam,
            "diameter": diam,
        }),
    );

    // Downstream effect at eps.
    let flow = FlowMap::new(*schedule, cloud.clone(), t, eps, cfg.steps)?;
    let latent = sample_unconditional(&complex, &potential, n, rng::derive(cfg.seed, 7))?;
    let q_ot = flow.transport_batch(&latent.outputs())?;
    let q_g = flow.transport_batch(&gauss)?;
    // stratified over components: the reference carries no cluster-mass noise
    let p_e = marginal_targets(schedule, &cloud, eps, n, rng::derive(cfg.seed, 8))?
        .as_flat()
        .to_vec();
    let w_ot = w2_flat(&q_ot, &p_e, d)?;
    let w_g = w2_flat(&q_g, &p_e, d)?;
    let se = bootstrap_se(&[n, n, n], cfg.bootstrap, rng::derive(cfg.seed, 9), |idx| {
        let pe = gather(&p_e, d, &idx[2]);
        let a = w2_flat(&gather(&q_g, d, &idx[1]), &pe, d).unwrap_or(f64::NAN);
        let b = w2_flat(&gather(&q_ot, d, &idx[0]), &pe, d).unwrap_or(f64::NAN);
        a - b
    });
    rep.check(Check::at_least(
        "pipeline_improvement",
        "W2(q_eps^gauss, p_eps) - W2(q_eps^ot, p_eps) > 0",
        w_g - w_ot,
        0.0,
        3.0 * se,
    ));
    rep.record(
        "pipeline",
        serde_json::json!({
            "w2_ot": w_ot,
            "w2_gaussian": w_g,
            "difference_se": se,
            "rejection_rate": latent.rejection_rate(),
        }),
    );
    Ok(rep.finish(started))
}

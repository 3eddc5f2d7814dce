use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use mongeflow::flow::FlowMap;
use mongeflow::latent::{build_complex, sample_conditional, sample_unconditional, BarycentricSamples};
use mongeflow::metrics::{median_cost, w2_entropic, w2_exact, EmpiricalLaw, Method};
use mongeflow::sdot::{fit, pushforward, FitOptions};
use mongeflow::verify::{
    marginal_targets, verify_pipeline, verify_theorem1, verify_theorem2, verify_theorem3, verify_theorem4,
    ExperimentReport, PipelineConfig, Theorem1Config, Theorem2Config, Theorem3Config, Theorem4Config, Verdict,
};
use mongeflow::{fixtures, marginal, rng, BrenierPotential, LatentComplex, MixtureMarginal, SourceLaw};
use serde::Serialize;

use crate::config::{RunConfig, SampleSource, OUT_ENV};
use crate::error::CliError;
use crate::run::{PerSample, RunDir, Timing};

pub const POTENTIAL: &str = "potential.json";
pub const COMPLEX: &str = "complex.json";
pub const CELLS: &str = "cells.json";
pub const FIT_REPORT: &str = "fit_report.json";
pub const TARGETS: &str = "targets.csv";
pub const SAMPLES: &str = "samples.csv";

/// Runs `f` on a pool of `workers` threads.
fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T, CliError> + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn default_artifacts() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| "mongeflow-out".into())
        .join("fit")
}

/// Loads and cross-checks a persisted potential and latent complex.
pub fn load_artifacts(dir: &Path) -> Result<(BrenierPotential, LatentComplex), CliError> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p)
            .map_err(|e| CliError::io(&p, e))
            .map(|t| (p, t))
    };
    let (p, text) = read(POTENTIAL)?;
    let potential = BrenierPotential::from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
    let (p, text) = read(COMPLEX)?;
    let complex = LatentComplex::from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
    if complex.dim != potential.dim() || complex.centroids.len() != potential.len() {
        return Err(CliError::Input(format!(
            "{}: complex has {} centroids in {}D, potential has {} targets in {}D",
            dir.display(),
            complex.centroids.len(),
            complex.dim,
            potential.len(),
            potential.dim()
        )));
    }
    Ok((potential, complex))
}

/// Fits the semi-discrete potential, estimates the cells and builds the
/// latent complex. Returns the run directory.
pub fn cmd_fit(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    with_pool(cfg.workers, || {
        let started = Instant::now();
        let schedule = cfg.schedule()?;
        let cloud = Arc::new(cfg.load_cloud()?);
        let targets = match cfg.t_prime {
            Some(t) => marginal_targets(&schedule, &cloud, t, cfg.targets, rng::derive(cfg.seed, 0))?,
            None => cloud,
        };
        let opts = FitOptions {
            tol: cfg.sdot_tol,
            mc_samples: cfg.sdot_mc_samples,
            max_iters: cfg.sdot_max_iters,
            eta0: None,
            seed: rng::derive(cfg.seed, 1),
        };
        let mut timing = Timing {
            workers: cfg.workers,
            ..Default::default()
        };
        let t0 = Instant::now();
        let (potential, stats) = fit(targets.clone(), SourceLaw::StandardNormal { dim: targets.dim() }, &opts)?;
        timing.phases.insert("fit".into(), t0.elapsed().as_secs_f64());
        let report = potential.report().cloned().expect("fit attaches a report");

        let mut run = RunDir::new(cfg.out_dir("fit"));
        run.put_json(FIT_REPORT, &report);
        if !report.converged {
            timing.total_seconds = started.elapsed().as_secs_f64();
            run.commit("fit", cfg, &timing)?;
            return Err(CliError::NotConverged {
                residual: report.residual,
                tol: report.tol,
                iterations: report.iterations,
            });
        }
        let t0 = Instant::now();
        let complex = build_complex(&potential, &stats, cfg.angle_threshold)?;
        timing.phases.insert("complex".into(), t0.elapsed().as_secs_f64());

        let mut csv = Vec::new();
        targets.write_csv(&mut csv)?;
        run.put(TARGETS, csv);
        run.put(POTENTIAL, with_newline(potential.to_json()?));
        run.put_json(CELLS, &stats);
        run.put(COMPLEX, with_newline(complex.to_json()?));
        timing.total_seconds = started.elapsed().as_secs_f64();
        run.commit("fit", cfg, &timing)
    })
}

fn with_newline(mut s: String) -> Vec<u8> {
    s.push('\n');
    s.into_bytes()
}

#[derive(Debug, Serialize)]
struct SampleSummary {
    count: usize,
    draws: usize,
    rejected: usize,
    rejection_rate: f64,
    label: Option<u32>,
    flow_to_eps: bool,
}

/// Latent barycentric sampling, optionally followed by the flow to `eps`.
pub fn cmd_sample(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    with_pool(cfg.workers, || {
        let started = Instant::now();
        let dir = cfg.artifact_dir().unwrap_or_else(default_artifacts);
        let (potential, complex) = load_artifacts(&dir)?;
        if let Some(l) = cfg.label {
            let known: Vec<u32> = (0..complex.components.len())
                .map(|k| complex.component_label(k))
                .collect();
            if !known.contains(&l) {
                return Err(CliError::Config(format!(
                    "unknown label {l}; the complex has labels {known:?}"
                )));
            }
        }
        let schedule = cfg.schedule()?;
        let flow = if cfg.flow_to_eps {
            let t = cfg
                .t_prime
                .ok_or_else(|| CliError::Config("flow_to_eps needs t_prime".into()))?;
            let cloud = Arc::new(cfg.load_cloud()?);
            if cloud.dim() != potential.dim() {
                return Err(CliError::Config("cloud and artifacts differ in dimension".into()));
            }
            Some(FlowMap::new(schedule, cloud, t, schedule.eps, cfg.flow_steps)?)
        } else {
            None
        };

        let d = potential.dim();
        let mut all = BarycentricSamples {
            dim: d,
            samples: Vec::with_capacity(cfg.count),
            draws: 0,
            rejected: 0,
        };
        let mut batches = Vec::new();
        let mut done = 0;
        let mut b = 0u64;
        while done < cfg.count {
            let n = cfg.timing_batch.min(cfg.count - done);
            let t0 = Instant::now();
            let seed = rng::derive(cfg.seed, b);
            let mut s = match cfg.label {
                Some(l) => sample_conditional(&complex, &potential, l, n, seed)?,
                None => sample_unconditional(&complex, &potential, n, seed)?,
            };
            if let Some(f) = &flow {
                let out = f.transport_batch(&s.outputs())?;
                for (smp, row) in s.samples.iter_mut().zip(out.chunks_exact(d)) {
                    smp.output = row.to_vec();
                }
            }
            batches.push((t0.elapsed().as_secs_f64(), n));
            all.draws += s.draws;
            all.rejected += s.rejected;
            all.samples.extend(s.samples);
            done += n;
            b += 1;
        }
        if let Some(l) = cfg.label {
            if let Some(bad) = all.samples.iter().find(|s| s.label != l) {
                return Err(mongeflow::Error::Domain(format!("conditional sample carries label {}", bad.label)).into());
            }
        }

        let mut run = RunDir::new(cfg.out_dir("sample"));
        let mut csv = Vec::new();
        all.write_csv(&mut csv)?;
        run.put(SAMPLES, csv);
        run.put_json(
            "sample_summary.json",
            &SampleSummary {
                count: all.samples.len(),
                draws: all.draws,
                rejected: all.rejected,
                rejection_rate: all.rejection_rate(),
                label: cfg.label,
                flow_to_eps: cfg.flow_to_eps,
            },
        );
        let timing = Timing {
            total_seconds: started.elapsed().as_secs_f64(),
            workers: cfg.workers,
            per_sample: PerSample::from_batches(&batches),
            ode_steps: Some(if flow.is_some() { cfg.flow_steps } else { 0 }),
            ot_evaluations_per_sample: (cfg.count > 0).then(|| all.draws as f64 / cfg.count as f64),
            ..Default::default()
        };
        run.commit("sample", cfg, &timing)
    })
}

#[derive(Debug)]
pub struct VerifyOutcome {
    pub dir: PathBuf,
    pub reports: Vec<ExperimentReport>,
}

impl VerifyOutcome {
    pub fn any_fail(&self) -> bool {
        self.reports.iter().any(|r| r.verdict == Verdict::Fail)
    }
}

/// Runs the selected experiments in order on the shipped fixtures.
pub fn cmd_verify(cfg: &RunConfig) -> Result<VerifyOutcome, CliError> {
    with_pool(cfg.workers, || {
        let started = Instant::now();
        if let Some(dir) = cfg.artifact_dir() {
            load_artifacts(&dir)?;
        }
        let schedule = cfg.schedule()?;
        let seed = cfg.seed;
        let steps = cfg.flow_steps;
        let boot = |default: usize| cfg.bootstrap.unwrap_or(default);
        let mut reports = Vec::new();
        for id in &cfg.experiments {
            let wrap = |source| CliError::Experiment { id: id.clone(), source };
            match id.as_str() {
                "theorem1" => {
                    let c = Theorem1Config {
                        steps,
                        seed,
                        ..Default::default()
                    };
                    let c = Theorem1Config {
                        bootstrap: boot(c.bootstrap),
                        ..c
                    };
                    reports.push(verify_theorem1(fixtures::two_cluster8(), &schedule, &c).map_err(wrap)?);
                }
                "theorem2" => {
                    for name in ["line2", "two_cluster8"] {
                        let c = Theorem2Config {
                            steps,
                            seed,
                            ..Default::default()
                        };
                        let c = Theorem2Config {
                            bootstrap: boot(c.bootstrap),
                            ..c
                        };
                        let cloud = fixtures::by_name(name).expect("shipped fixture");
                        let mut r = verify_theorem2(cloud, &schedule, &c).map_err(wrap)?;
                        r.id = format!("theorem2-{name}");
                        reports.push(r);
                    }
                }
                "theorem3" => {
                    let c = Theorem3Config {
                        steps,
                        seed,
                        ..Default::default()
                    };
                    let c = Theorem3Config {
                        bootstrap: boot(c.bootstrap),
                        ..c
                    };
                    reports.push(verify_theorem3(fixtures::line2(), &schedule, &c).map_err(wrap)?);
                }
                "theorem4" => {
                    let c = Theorem4Config {
                        seed,
                        ..Default::default()
                    };
                    reports.push(verify_theorem4(fixtures::line8(), &c).map_err(wrap)?);
                }
                "pipeline" => {
                    let d = PipelineConfig::default();
                    let c = PipelineConfig {
                        t_prime: cfg.t_prime.unwrap_or(d.t_prime),
                        targets: cfg.targets,
                        tol: cfg.sdot_tol,
                        mc_samples: cfg.sdot_mc_samples,
                        max_iters: cfg.sdot_max_iters,
                        angle_threshold: cfg.angle_threshold,
                        steps,
                        bootstrap: boot(d.bootstrap),
                        seed,
                        ..d
                    };
                    reports.push(verify_pipeline(fixtures::two_cluster8(), &schedule, &c).map_err(wrap)?);
                }
                other => return Err(CliError::Config(format!("unknown experiment {other:?}"))),
            }
        }

        let mut run = RunDir::new(cfg.out_dir("verify"));
        let mut timing = Timing {
            workers: cfg.workers,
            ..Default::default()
        };
        let mut summary = Vec::new();
        for r in &reports {
            run.put_json(&format!("reports/{}.json", r.id), r);
            if let Some(c) = &r.curve {
                let mut csv = Vec::new();
                c.write_csv(&mut csv)?;
                run.put(&format!("reports/{}.csv", r.id), csv);
            }
            timing.phases.insert(r.id.clone(), r.runtime);
            summary.push(serde_json::json!({ "id": r.id, "verdict": r.verdict }));
        }
        let overall = if reports.iter().any(|r| r.verdict == Verdict::Fail) {
            Verdict::Fail
        } else if reports.iter().any(|r| r.verdict == Verdict::Inconclusive) {
            Verdict::Inconclusive
        } else {
            Verdict::Pass
        };
        run.put_json(
            "summary.json",
            &serde_json::json!({ "experiments": summary, "verdict": overall }),
        );
        timing.total_seconds = started.elapsed().as_secs_f64();
        let dir = run.commit("verify", cfg, &timing)?;
        Ok(VerifyOutcome { dir, reports })
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PriorError {
    pub value: f64,
    pub method: Method,
    pub sizes: [usize; 2],
    pub prior: SampleSource,
    pub reference: SampleSource,
    pub converged: bool,
    pub tolerance: f64,
}

/// W2 between two sample sources, exact unless `entropic` is set.
pub fn cmd_prior_error(cfg: &RunConfig) -> Result<(PathBuf, PriorError), CliError> {
    with_pool(cfg.workers, || {
        let started = Instant::now();
        let schedule = cfg.schedule()?;
        let uses_fit = |s: SampleSource| matches!(s, SampleSource::Pushforward | SampleSource::Targets);
        let potential = if uses_fit(cfg.prior) || uses_fit(cfg.reference) {
            Some(load_artifacts(&cfg.artifact_dir().unwrap_or_else(default_artifacts))?.0)
        } else {
            None
        };
        let cloud = Arc::new(cfg.load_cloud()?);
        let d = potential.as_ref().map_or(cloud.dim(), |p| p.dim());
        let n = cfg.prior_samples;
        if n == 0 {
            return Err(CliError::Config("prior_samples must be >= 1".into()));
        }
        let draw = |s: SampleSource| -> Result<EmpiricalLaw, CliError> {
            Ok(match s {
                SampleSource::Gaussian => EmpiricalLaw::uniform(
                    d,
                    MixtureMarginal::standard_normal(d).sample(n, rng::derive(cfg.seed, 11)),
                )?,
                SampleSource::Marginal => {
                    let t = cfg
                        .t_prime
                        .ok_or_else(|| CliError::Config("the marginal source needs t_prime".into()))?;
                    EmpiricalLaw::uniform(
                        d,
                        marginal(&schedule, cloud.clone(), t)?.sample(n, rng::derive(cfg.seed, 12)),
                    )?
                }
                SampleSource::Pushforward => {
                    let p = potential.as_ref().expect("loaded above");
                    EmpiricalLaw::uniform(d, pushforward(p, n, rng::derive(cfg.seed, 13)).outputs)?.deduplicated()
                }
                SampleSource::Targets => {
                    let p = potential.as_ref().expect("loaded above");
                    EmpiricalLaw::uniform(d, p.targets().as_flat().to_vec())?
                }
            })
        };
        let a = draw(cfg.prior)?;
        let b = draw(cfg.reference)?;
        let res = if cfg.entropic {
            let reg = cfg.entropic_reg * median_cost(&a, &b);
            w2_entropic(&a, &b, reg, cfg.entropic_max_iters)?
        } else {
            w2_exact(&a, &b)?
        };
        let out = PriorError {
            value: res.w2(),
            method: res.method,
            sizes: [a.len(), b.len()],
            prior: cfg.prior,
            reference: cfg.reference,
            converged: res.converged,
            tolerance: res.tolerance,
        };
        let mut run = RunDir::new(cfg.out_dir("prior-error"));
        run.put_json("prior_error.json", &out);
        let timing = Timing {
            total_seconds: started.elapsed().as_secs_f64(),
            workers: cfg.workers,
            ..Default::default()
        };
        Ok((run.commit("prior-error", cfg, &timing)?, out))
    })
}

/// Version, fixtures, experiments, the resolved config and, when present,
/// a summary of the fit artifacts.
pub fn cmd_info(cfg: &RunConfig) -> Result<serde_json::Value, CliError> {
    let fixtures: Vec<serde_json::Value> = fixtures::NAMES
        .iter()
        .map(|name| {
            let c = fixtures::by_name(name).expect("shipped fixture");
            serde_json::json!({
                "name": name,
                "points": c.len(),
                "dim": c.dim(),
                "labeled": c.labels().is_some(),
                "diameter": c.diameter(),
            })
        })
        .collect();
    let mut info = serde_json::json!({
        "version": mongeflow::VERSION,
        "fixtures": fixtures,
        "experiments": crate::config::EXPERIMENTS,
        "config": serde_json::from_str::<serde_json::Value>(&cfg.to_json()).expect("config is JSON"),
    });
    if let Some(dir) = cfg.artifact_dir() {
        let (p, c) = load_artifacts(&dir)?;
        info["artifacts"] = serde_json::json!({
            "targets": p.len(),
            "dim": p.dim(),
            "fit": p.report(),
            "simplices": c.simplices.len(),
            "components": c.components.len(),
            "labels": (0..c.components.len()).map(|k| c.component_label(k)).collect::<Vec<_>>(),
        });
    }
    Ok(info)
}

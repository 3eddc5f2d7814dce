//! Flat run configuration: defaults, then the config file, then flags.

use std::path::{Path, PathBuf};

use mongeflow::latent::DEFAULT_ANGLE_THRESHOLD;
use mongeflow::sdot::{DEFAULT_MAX_ITERS, DEFAULT_TOL};
use mongeflow::{fixtures, NoiseSchedule, PointCloud};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable overriding the default output root.
pub const OUT_ENV: &str = "MONGEFLOW_OUT";

pub const EXPERIMENTS: [&str; 5] = ["theorem1", "theorem2", "theorem3", "theorem4", "pipeline"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    /// Standard normal draws.
    Gaussian,
    /// Discrete OT pushforward of the fitted potential.
    Pushforward,
    /// Draws from the data marginal at `t_prime`.
    Marginal,
    /// The fitted target cloud itself.
    Targets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// CSV path, or `fixture:NAME`.
    pub cloud: String,
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_max: f64,
    pub eps: f64,
    /// When set, `fit` targets `targets` draws of the marginal at this time
    /// instead of the raw cloud.
    pub t_prime: Option<f64>,
    pub targets: usize,
    pub sdot_tol: f64,
    pub sdot_mc_samples: Option<usize>,
    pub sdot_max_iters: usize,
    pub angle_threshold: f64,
    pub flow_steps: usize,
    /// Directory holding `potential.json` and `complex.json`.
    pub artifacts: Option<String>,
    pub count: usize,
    pub label: Option<u32>,
    /// Transport samples from `t_prime` to `eps` after latent sampling.
    pub flow_to_eps: bool,
    /// Samples per timing batch.
    pub timing_batch: usize,
    pub experiments: Vec<String>,
    pub bootstrap: Option<usize>,
    pub prior: SampleSource,
    pub reference: SampleSource,
    pub prior_samples: usize,
    pub entropic: bool,
    /// Regularization as a multiple of the median pairwise cost.
    pub entropic_reg: f64,
    pub entropic_max_iters: usize,
    pub seed: u64,
    /// Execution settings, kept out of the resolved config so artifacts do
    /// not depend on them.
    #[serde(skip_serializing)]
    pub workers: usize,
    #[serde(skip_serializing)]
    pub out: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = NoiseSchedule::default();
        Self {
            cloud: "fixture:two_cluster8".into(),
            beta_min: s.beta_min,
            beta_max: s.beta_max,
            t_max: s.t_max,
            eps: s.eps,
            t_prime: None,
            targets: 64,
            sdot_tol: DEFAULT_TOL,
            sdot_mc_samples: None,
            sdot_max_iters: DEFAULT_MAX_ITERS,
            angle_threshold: DEFAULT_ANGLE_THRESHOLD,
            flow_steps: mongeflow::flow::DEFAULT_STEPS,
            artifacts: None,
            count: 1024,
            label: None,
            flow_to_eps: false,
            timing_batch: 256,
            experiments: Vec::new(),
            bootstrap: None,
            prior: SampleSource::Pushforward,
            reference: SampleSource::Targets,
            prior_samples: 512,
            entropic: false,
            entropic_reg: 1e-3,
            entropic_max_iters: 20_000,
            seed: 0,
            workers: 1,
            out: None,
        }
    }
}

/// Command-line overrides; `None` keeps the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<String>,
    pub label: Option<u32>,
    pub count: Option<usize>,
    pub t_prime: Option<f64>,
    pub experiments: Option<Vec<String>>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults, then `file`, then `o`.
    pub fn resolve(file: Option<&Path>, o: &Overrides) -> Result<Self, CliError> {
        let mut c = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(v) = o.seed {
            c.seed = v;
        }
        if let Some(v) = o.workers {
            c.workers = v;
        }
        if let Some(v) = &o.out {
            c.out = Some(v.clone());
        }
        if let Some(v) = o.label {
            c.label = Some(v);
        }
        if let Some(v) = o.count {
            c.count = v;
        }
        if let Some(v) = o.t_prime {
            c.t_prime = Some(v);
        }
        if let Some(v) = &o.experiments {
            c.experiments = v.clone();
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.workers == 0 {
            return Err(CliError::Config("workers must be >= 1".into()));
        }
        if self.timing_batch == 0 {
            return Err(CliError::Config("timing_batch must be >= 1".into()));
        }
        if let Some(e) = self.experiments.iter().find(|e| !EXPERIMENTS.contains(&e.as_str())) {
            return Err(CliError::Config(format!(
                "unknown experiment {e:?}; expected one of {}",
                EXPERIMENTS.join(", ")
            )));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        Ok(NoiseSchedule::new(self.beta_min, self.beta_max, self.t_max, self.eps)?)
    }

    pub fn load_cloud(&self) -> Result<PointCloud, CliError> {
        if let Some(name) = self.cloud.strip_prefix("fixture:") {
            return fixtures::by_name(name).map(|c| (*c).clone()).ok_or_else(|| {
                CliError::Config(format!(
                    "unknown fixture {name:?}; known: {}",
                    fixtures::NAMES.join(", ")
                ))
            });
        }
        let path = Path::new(&self.cloud);
        let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        PointCloud::read_csv(file).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    /// `--out`, else `$MONGEFLOW_OUT/<command>`, else `mongeflow-out/<command>`.
    pub fn out_dir(&self, command: &str) -> PathBuf {
        match &self.out {
            Some(p) => PathBuf::from(p),
            None => {
                let root = std::env::var_os(OUT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| "mongeflow-out".into());
                root.join(command)
            }
        }
    }

    /// Artifact directory for commands that consume a fit.
    pub fn artifact_dir(&self) -> Option<PathBuf> {
        self.artifacts.as_ref().map(PathBuf::from)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

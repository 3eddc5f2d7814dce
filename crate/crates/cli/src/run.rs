//! Run directories: artifacts, resolved config, manifest and timing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";
pub const TIMING: &str = "timing.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Buffered outputs of one command; nothing touches the disk until
/// [`RunDir::commit`], so failed runs leave no partial artifacts.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    files: BTreeMap<String, Vec<u8>>,
}

impl RunDir {
    pub fn new(path: PathBuf) -> Self {
        Self {
            path,
            files: BTreeMap::new(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn put(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.to_string(), bytes);
    }

    pub fn put_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) {
        let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
        text.push('\n');
        self.put(name, text.into_bytes());
    }

    /// Writes the artifacts, `config.json`, the manifest (version, seed and
    /// SHA-256 of every artifact) and `timing.json`, which is the only
    /// output allowed to differ between identical runs.
    pub fn commit(mut self, command: &str, config: &RunConfig, timing: &Timing) -> Result<PathBuf, CliError> {
        let mut cfg = config.to_json();
        cfg.push('\n');
        self.put(CONFIG, cfg.into_bytes());
        let hashes: BTreeMap<&str, String> = self.files.iter().map(|(k, v)| (k.as_str(), sha256_hex(v))).collect();
        let manifest = serde_json::json!({
            "command": command,
            "version": mongeflow::VERSION,
            "seed": config.seed,
            "artifacts": hashes,
        });
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::create_dir_all(&self.path).map_err(|e| CliError::io(&self.path, e))?;
        for (name, bytes) in &self.files {
            let p = self.path.join(name);
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
            }
            std::fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        }
        let p = self.path.join(MANIFEST);
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        let mut t = serde_json::to_string_pretty(timing).expect("timing serializes");
        t.push('\n');
        let p = self.path.join(TIMING);
        std::fs::write(&p, t).map_err(|e| CliError::io(&p, e))?;
        Ok(self.path)
    }
}

/// Wall-clock summary in seconds, from a monotonic clock.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<PerSample>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub phases: BTreeMap<String, f64>,
    /// Probability-flow RK4 steps per generated sample.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ode_steps: Option<usize>,
    /// Transport-map (cell location) evaluations per generated sample.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ot_evaluations_per_sample: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerSample {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl PerSample {
    /// `batches` holds `(seconds, samples)`; every sample of a batch is
    /// charged the batch average.
    pub fn from_batches(batches: &[(f64, usize)]) -> Option<Self> {
        let total: usize = batches.iter().map(|b| b.1).sum();
        if total == 0 {
            return None;
        }
        let mut per: Vec<(f64, usize)> = batches
            .iter()
            .filter(|b| b.1 > 0)
            .map(|&(s, n)| (s / n as f64, n))
            .collect();
        per.sort_by(|a, b| a.0.total_cmp(&b.0));
        let quantile = |q: f64| {
            let target = (q * total as f64).ceil().max(1.0) as usize;
            let mut seen = 0;
            for &(v, n) in &per {
                seen += n;
                if seen >= target {
                    return v;
                }
            }
            per.last().unwrap().0
        };
        Some(Self {
            mean: batches.iter().map(|b| b.0).sum::<f64>() / total as f64,
            median: quantile(0.5),
            p95: quantile(0.95),
        })
    }
}

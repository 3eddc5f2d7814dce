//! Desk-scale experiments for the transport-map error bounds, with explicit
//! Monte Carlo slack and pass / fail / inconclusive verdicts.

mod pipeline;
mod stats;
mod theorems;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cloud::fmt_f64;
use crate::error::Result;

pub use pipeline::{marginal_targets, verify_pipeline, PipelineConfig};
pub use stats::{bootstrap_se, linear_fit, LinearFit, BOOTSTRAP_REPS};
pub use theorems::{
    map_error_1d, quantile_heights, sup_error_1d, verify_theorem1, verify_theorem2, verify_theorem3, verify_theorem4,
    Theorem1Config, Theorem2Config, Theorem3Config, Theorem4Config,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

/// One inequality `lhs >= rhs` or `lhs <= rhs`, relaxed by `slack`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Human-readable form, e.g. `"W2(p_eps,q_eps) >= ratio * W2(p_T,q_T)"`.
    pub relation: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub verdict: Verdict,
}

impl Check {
    /// Fails when `lhs < rhs - slack`; inconclusive when the slack exceeds
    /// half the measured gap.
    pub fn at_least(name: &str, relation: &str, lhs: f64, rhs: f64, slack: f64) -> Self {
        Self::judged(name, relation, lhs, rhs, slack, lhs - rhs)
    }

    pub fn at_most(name: &str, relation: &str, lhs: f64, rhs: f64, slack: f64) -> Self {
        Self::judged(name, relation, lhs, rhs, slack, rhs - lhs)
    }

    fn judged(name: &str, relation: &str, lhs: f64, rhs: f64, slack: f64, margin: f64) -> Self {
        let slack = slack.max(0.0);
        let verdict = if margin.is_nan() || margin < -slack {
            Verdict::Fail
        } else if slack > 0.5 * margin.abs() {
            Verdict::Inconclusive
        } else {
            Verdict::Pass
        };
        Self {
            name: name.into(),
            relation: relation.into(),
            lhs,
            rhs,
            slack,
            verdict,
        }
    }

    /// `lo <= value <= hi`, judged on the distance to the nearer end.
    pub fn within(name: &str, relation: &str, value: f64, lo: f64, hi: f64, slack: f64) -> Self {
        let margin = (value - lo).min(hi - value);
        let rhs = if value - lo <= hi - value { lo } else { hi };
        Self::judged(name, relation, value, rhs, slack, margin)
    }

    /// Exact check without slack.
    pub fn holds(name: &str, relation: &str, lhs: f64, rhs: f64, ok: bool) -> Self {
        Self {
            name: name.into(),
            relation: relation.into(),
            lhs,
            rhs,
            slack: 0.0,
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        }
    }
}

/// Columnar data for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Curve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.columns.join(","))?;
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub id: String,
    pub config: serde_json::Value,
    pub measured: BTreeMap<String, serde_json::Value>,
    pub checks: Vec<Check>,
    pub verdict: Verdict,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<Curve>,
    /// Wall-clock seconds; kept out of the JSON so reports stay
    /// reproducible.
    #[serde(skip)]
    pub runtime: f64,
}

impl ExperimentReport {
    fn new(id: &str, config: impl Serialize, seed: u64) -> Self {
        Self {
            id: id.into(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            measured: BTreeMap::new(),
            checks: Vec::new(),
            verdict: Verdict::Pass,
            seeds: vec![seed],
            curve: None,
            runtime: 0.0,
        }
    }

    fn record(&mut self, key: &str, value: impl Serialize) {
        self.measured.insert(
            key.into(),
            serde_json::to_value(value).unwrap_or(serde_json::Value::Null),
        );
    }

    fn check(&mut self, c: Check) {
        self.checks.push(c);
    }

    /// Any failure fails the report; otherwise any inconclusive check makes
    /// it inconclusive.
    fn finish(mut self, started: std::time::Instant) -> Self {
        let v = self.checks.iter().map(|c| c.verdict);
        self.verdict = if v.clone().any(|x| x == Verdict::Fail) {
            Verdict::Fail
        } else if v.clone().any(|x| x == Verdict::Inconclusive) {
            Verdict::Inconclusive
        } else {
            Verdict::Pass
        };
        self.runtime = started.elapsed().as_secs_f64();
        self
    }

    pub fn check_named(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

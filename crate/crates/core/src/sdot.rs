//! Semi-discrete optimal transport from a continuous source law to a finite
//! target cloud.
//!
//! The map is the gradient of `u_h(z) = max_i (<z, y_i> + h_i)`; cell `W_i`
//! is where target `i` wins. Heights are fitted so every cell carries source
//! mass `1/|I|`, with cell masses estimated on a fixed Monte Carlo sample.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{dot, PointCloud};
use crate::error::{Error, Result};
use crate::mixture::MixtureMarginal;
use crate::rng::CHUNK;

/// Default fit tolerance on `max_i |w_i - 1/|I||`.
pub const DEFAULT_TOL: f64 = 5e-3;
/// Default Monte Carlo draws per target.
pub const DEFAULT_SAMPLES_PER_TARGET: usize = 4000;
pub const DEFAULT_MAX_ITERS: usize = 20_000;

/// Continuous law the cells partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceLaw {
    StandardNormal { dim: usize },
    Mixture { marginal: MixtureMarginal },
}

impl SourceLaw {
    pub fn dim(&self) -> usize {
        match self {
            Self::StandardNormal { dim } => *dim,
            Self::Mixture { marginal } => marginal.dim(),
        }
    }

    pub fn sample(&self, count: usize, seed: u64) -> Vec<f64> {
        match self {
            Self::StandardNormal { dim } => MixtureMarginal::standard_normal(*dim).sample(count, seed),
            Self::Mixture { marginal } => marginal.sample(count, seed),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            Self::StandardNormal { dim } => vec![0.0; *dim],
            Self::Mixture { marginal } => marginal
                .cloud()
                .mean()
                .into_iter()
                .map(|v| v * marginal.mean_scale())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    /// `max_i |w_i - 1/|I||` at the returned heights.
    pub residual: f64,
    pub converged: bool,
    pub tol: f64,
    pub mc_samples: usize,
    pub seed: u64,
    /// Initial step size; the step at iteration `k` is `eta0 / sqrt(k)`.
    pub eta0: f64,
    /// Number of (iteration, cell) pairs where a cell was empty.
    pub empty_events: usize,
    /// Cells still empty at the returned heights.
    pub empty_cells: Vec<usize>,
    /// Residual after every iteration.
    #[serde(skip)]
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub measures: Vec<f64>,
    /// `None` for empty cells.
    pub centroids: Vec<Option<Vec<f64>>>,
    pub sample_count: usize,
    pub seed: u64,
}

impl CellStats {
    pub fn empty_cells(&self) -> Vec<usize> {
        self.centroids
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_none())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn residual(&self) -> f64 {
        let nu = 1.0 / self.measures.len() as f64;
        self.measures.iter().map(|w| (w - nu).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrenierPotential {
    targets: Arc<PointCloud>,
    heights: Vec<f64>,
    source: SourceLaw,
    report: Option<FitReport>,
}

impl BrenierPotential {
    /// Heights are gauge-normalized on construction.
    pub fn new(targets: Arc<PointCloud>, heights: Vec<f64>, source: SourceLaw) -> Result<Self> {
        if heights.len() != targets.len() {
            return Err(Error::Usage(format!(
                "{} heights for {} targets",
                heights.len(),
                targets.len()
            )));
        }
        if source.dim() != targets.dim() {
            return Err(Error::Usage(format!(
                "source dimension {} differs from target dimension {}",
                source.dim(),
                targets.dim()
            )));
        }
        if heights.iter().any(|h| !h.is_finite()) {
            return Err(Error::Domain("non-finite height".into()));
        }
        Ok(Self {
            targets,
            heights: normalized(&heights),
            source,
            report: None,
        })
    }

    pub fn zero(targets: Arc<PointCloud>, source: SourceLaw) -> Result<Self> {
        let n = targets.len();
        Self::new(targets, vec![0.0; n], source)
    }

    pub fn targets(&self) -> &Arc<PointCloud> {
        &self.targets
    }
    pub fn heights(&self) -> &[f64] {
        &self.heights
    }
    pub fn source(&self) -> &SourceLaw {
        &self.source
    }
    pub fn report(&self) -> Option<&FitReport> {
        self.report.as_ref()
    }
    pub fn dim(&self) -> usize {
        self.targets.dim()
    }
    pub fn len(&self) -> usize {
        self.targets.len()
    }
    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Cell index of `z`; ties go to the lowest index.
    pub fn assign(&self, z: &[f64]) -> usize {
        assign_with(&self.targets, &self.heights, z)
    }

    /// `u_h(z)`.
    pub fn value(&self, z: &[f64]) -> f64 {
        (0..self.len())
            .map(|i| dot(z, self.targets.point(i)) + self.heights[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `grad u_h(z)`, the target point of the cell holding `z`.
    pub fn map(&self, z: &[f64]) -> &[f64] {
        self.targets.point(self.assign(z))
    }

    /// Cell boundaries of a 1D potential, in increasing target order:
    /// `(sorted target indices, boundaries)` with one boundary fewer than
    /// targets. Cells squeezed out by their neighbours give non-increasing
    /// boundary pairs.
    pub fn boundaries_1d(&self) -> Result<(Vec<usize>, Vec<f64>)> {
        if self.dim() != 1 {
            return Err(Error::Usage("boundaries_1d needs a 1D potential".into()));
        }
        let y = self.targets.as_flat();
        let mut order: Vec<usize> = (0..y.len()).collect();
        order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
        let b = order
            .windows(2)
            .map(|w| (self.heights[w[0]] - self.heights[w[1]]) / (y[w[1]] - y[w[0]]))
            .collect();
        Ok((order, b))
    }

    /// JSON persistence with inline targets.
    pub fn to_json(&self) -> Result<String> {
        let file = PotentialFile {
            dim: self.dim(),
            points: self.targets.points().map(|p| p.to_vec()).collect(),
            labels: self.targets.labels().map(|l| l.to_vec()),
            heights: self.heights.clone(),
            source: self.source.clone(),
            fit: self.report.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses and re-validates a persisted potential, including the gauge.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: PotentialFile = serde_json::from_str(text)?;
        if file.points.iter().any(|p| p.len() != file.dim) {
            return Err(Error::Usage("target rows do not match dim".into()));
        }
        let targets = PointCloud::from_rows(&file.points, file.labels)?;
        let scale = file.heights.iter().fold(1.0f64, |a, h| a.max(h.abs()));
        let sum: f64 = file.heights.iter().sum();
        if sum.abs() > 1e-9 * scale * file.heights.len() as f64 {
            return Err(Error::Domain(format!("heights are not gauge-normalized (sum {sum})")));
        }
        // validate through `new` but keep the stored heights bit for bit
        let mut p = Self::new(Arc::new(targets), file.heights.clone(), file.source)?;
        p.heights = file.heights;
        p.report = file.fit;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PotentialFile {
    dim: usize,
    points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<u32>>,
    heights: Vec<f64>,
    source: SourceLaw,
    #[serde(default)]
    fit: Option<FitReport>,
}

fn normalized(h: &[f64]) -> Vec<f64> {
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    h.iter().map(|v| v - mean).collect()
}

fn assign_with(targets: &PointCloud, heights: &[f64], z: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, h) in heights.iter().enumerate() {
        let v = dot(z, targets.point(i)) + h;
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Best and runner-up scores at `z`.
fn top_two(targets: &PointCloud, heights: &[f64], z: &[f64]) -> (f64, f64) {
    let mut a = f64::NEG_INFINITY;
    let mut b = f64::NEG_INFINITY;
    for (i, h) in heights.iter().enumerate() {
        let v = dot(z, targets.point(i)) + h;
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    (a, b)
}

fn cell_counts(targets: &PointCloud, heights: &[f64], samples: &[f64]) -> Vec<usize> {
    let n = targets.len();
    let dim = targets.dim();
    samples
        .par_chunks(CHUNK * dim)
        .map(|block| {
            let mut c = vec![0usize; n];
            for z in block.chunks_exact(dim) {
                c[assign_with(targets, heights, z)] += 1;
            }
            c
        })
        .reduce(
            || vec![0usize; n],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        )
}

/// Cell masses and centroids from `mc_samples` source draws.
pub fn estimate_cells(potential: &BrenierPotential, mc_samples: usize, seed: u64) -> Result<CellStats> {
    let n = potential.len();
    if mc_samples < n {
        return Err(Error::Usage(format!("need at least {n} samples, got {mc_samples}")));
    }
    let samples = potential.source.sample(mc_samples, seed);
    Ok(cells_from_samples(potential, &samples, seed))
}

fn cells_from_samples(potential: &BrenierPotential, samples: &[f64], seed: u64) -> CellStats {
    let n = potential.len();
    let dim = potential.dim();
    // per-chunk partial sums combined in chunk order keep the result
    // independent of the worker count
    let partials: Vec<(Vec<usize>, Vec<f64>)> = samples
        .par_chunks(CHUNK * dim)
        .map(|block| {
            let mut c = vec![0usize; n];
            let mut s = vec![0.0; n * dim];
            for z in block.chunks_exact(dim) {
                let i = potential.assign(z);
                c[i] += 1;
                for (acc, v) in s[i * dim..(i + 1) * dim].iter_mut().zip(z) {
                    *acc += v;
                }
            }
            (c, s)
        })
        .collect();
    let mut counts = vec![0usize; n];
    let mut sums = vec![0.0; n * dim];
    for (c, s) in partials {
        counts.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        sums.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    let total = samples.len() / dim;
    CellStats {
        measures: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        centroids: (0..n)
            .map(|i| {
                (counts[i] > 0).then(|| {
                    sums[i * dim..(i + 1) * dim]
                        .iter()
                        .map(|v| v / counts[i] as f64)
                        .collect()
                })
            })
            .collect(),
        sample_count: total,
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    pub tol: f64,
    /// Total Monte Carlo draws; `None` means 4000 per target.
    pub mc_samples: Option<usize>,
    pub max_iters: usize,
    /// Initial step; `None` estimates it from the boundary flux at `h = 0`.
    pub eta0: Option<f64>,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            mc_samples: None,
            max_iters: DEFAULT_MAX_ITERS,
            eta0: None,
            seed: 0,
        }
    }
}

/// Inverse of the mean diagonal of the energy Hessian, estimated from the
/// share of samples whose two best scores are within `gap`.
fn initial_step(targets: &PointCloud, heights: &[f64], samples: &[f64]) -> f64 {
    let dim = targets.dim();
    let mut gaps: Vec<f64> = samples
        .par_chunks(dim)
        .map(|z| {
            let (a, b) = top_two(targets, heights, z);
            a - b
        })
        .collect();
    let q = 0.02;
    let k = ((gaps.len() as f64 * q) as usize).max(1).min(gaps.len() - 1);
    gaps.select_nth_unstable_by(k, f64::total_cmp);
    let gap = gaps[k];
    if !(gap > 0.0) || !gap.is_finite() {
        return 1.0;
    }
    // mean_i dw_i/dh_i ~ P(gap < g) / (g |I|)
    gap * targets.len() as f64 / q
}

/// Fits heights by gradient descent on the semi-discrete energy, whose
/// gradient is `w(h) - 1/|I|`.
pub fn fit(targets: Arc<PointCloud>, source: SourceLaw, options: &FitOptions) -> Result<(BrenierPotential, CellStats)> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::Usage("empty target cloud".into()));
    }
    if !(options.tol > 0.0) {
        return Err(Error::Domain(format!("tol must be positive, got {}", options.tol)));
    }
    let mc = options.mc_samples.unwrap_or(DEFAULT_SAMPLES_PER_TARGET * n);
    if mc < n {
        return Err(Error::Usage(format!("need at least {n} samples, got {mc}")));
    }
    // start from nearest-target (Voronoi) cells, h_i = -|y_i|^2 / 2
    let h0 = targets.points().map(|y| -0.5 * dot(y, y)).collect();
    let mut potential = BrenierPotential::new(targets.clone(), h0, source)?;
    let samples = potential.source.sample(mc, options.seed);
    let nu = 1.0 / n as f64;
    let eta0 = match options.eta0 {
        Some(e) if e > 0.0 && e.is_finite() => e,
        Some(e) => return Err(Error::Domain(format!("eta0 must be positive, got {e}"))),
        None if n == 1 => 1.0,
        None => initial_step(&targets, &potential.heights, &samples),
    };

    let mut h = potential.heights.clone();
    let mut best = (f64::INFINITY, h.clone());
    let mut history = Vec::new();
    let mut empty_events = 0;
    let mut iterations = 0;
    let residual_of = |counts: &[usize]| {
        counts
            .iter()
            .map(|&c| (c as f64 / mc as f64 - nu).abs())
            .fold(0.0, f64::max)
    };
    let mut counts = cell_counts(&targets, &h, &samples);
    loop {
        let r = residual_of(&counts);
        if r < best.0 {
            best = (r, h.clone());
        }
        if r <= options.tol || iterations >= options.max_iters {
            break;
        }
        iterations += 1;
        // empty cells get eta * nu here too, since their w is 0
        empty_events += counts.iter().filter(|&&c| c == 0).count();
        let eta = eta0 / (iterations as f64).sqrt();
        for (hi, &c) in h.iter_mut().zip(&counts) {
            *hi += eta * (nu - c as f64 / mc as f64);
        }
        h = normalized(&h);
        counts = cell_counts(&targets, &h, &samples);
        history.push(residual_of(&counts));
    }

    potential.heights = normalized(&best.1);
    let stats = cells_from_samples(&potential, &samples, options.seed);
    potential.report = Some(FitReport {
        iterations,
        residual: stats.residual(),
        converged: stats.residual() <= options.tol,
        tol: options.tol,
        mc_samples: mc,
        seed: options.seed,
        eta0,
        empty_events,
        empty_cells: stats.empty_cells(),
        history,
    });
    Ok((potential, stats))
}

/// Discrete OT pushforward draws with their latent codes.
#[derive(Debug, Clone, PartialEq)]
pub struct Pushforward {
    pub dim: usize,
    /// Row-major `y_{assign(z)}`.
    pub outputs: Vec<f64>,
    /// Row-major `z`.
    pub latents: Vec<f64>,
    pub indices: Vec<usize>,
}

pub fn pushforward(potential: &BrenierPotential, count: usize, seed: u64) -> Pushforward {
    let dim = potential.dim();
    let latents = potential.source.sample(count, seed);
    let indices: Vec<usize> = latents.par_chunks(dim).map(|z| potential.assign(z)).collect();
    let outputs = indices
        .iter()
        .flat_map(|&i| potential.targets.point(i).iter().copied())
        .collect();
    Pushforward {
        dim,
        outputs,
        latents,
        indices,
    }
}

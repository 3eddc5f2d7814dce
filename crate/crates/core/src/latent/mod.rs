//! Latent complex over cell centroids and the barycentric samplers.
//!
//! Centroids of the semi-discrete cells are triangulated; an edge is pruned
//! when the angle between the two targets it joins exceeds a threshold (or
//! their labels differ), and simplices survive only with all edges intact.
//! Unconditional samples locate a source draw in a simplex and reuse its
//! barycentric weights on the vertex targets; conditional samples pick a
//! simplex of the requested component and draw normalized uniform weights.

pub mod delaunay;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{dot, fmt_f64};
use crate::error::{Error, Result};
use crate::rng;
use crate::sdot::{BrenierPotential, CellStats};

pub const DEFAULT_ANGLE_THRESHOLD: f64 = std::f64::consts::FRAC_PI_2;
/// Barycentric acceptance slack.
pub const LOCATE_TOL: f64 = 1e-10;
/// Draws after which a low acceptance rate becomes a coverage error.
pub const COVERAGE_DRAWS: usize = 100_000;
pub const MIN_ACCEPTANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentComplex {
    pub dim: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Retained simplices, sorted vertex tuples of length `dim + 1`.
    pub simplices: Vec<Vec<usize>>,
    pub kept_edges: Vec<(usize, usize)>,
    /// Partition of all centroids; isolated centroids are singletons.
    pub components: Vec<Vec<usize>>,
    /// Target label of each component, when the targets are labeled.
    pub labels: Option<Vec<u32>>,
    /// Component of each retained simplex.
    pub simplex_components: Vec<usize>,
    pub angle_threshold: f64,
    /// Delaunay simplices before pruning.
    pub triangulated: usize,
    #[serde(skip)]
    frames: Vec<Option<Frame>>,
}

/// `lambda[1..] = inv * (z - origin)`, `lambda[0] = 1 - sum`.
#[derive(Debug, Clone, PartialEq)]
struct Frame {
    origin: Vec<f64>,
    inv: DMatrix<f64>,
}

fn frame(centroids: &[Vec<f64>], s: &[usize]) -> Option<Frame> {
    let d = s.len() - 1;
    let o = &centroids[s[0]];
    let m = DMatrix::from_fn(d, d, |r, c| centroids[s[c + 1]][r] - o[r]);
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(scale > 0.0) || m.determinant().abs() <= 1e-14 * scale.powi(d as i32) {
        return None;
    }
    m.try_inverse().map(|inv| Frame { origin: o.clone(), inv })
}

/// Angle between two targets; 0 when either is the origin.
pub fn target_angle(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0).acos()
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut k = i;
        while self.0[k] != r {
            let next = self.0[k];
            self.0[k] = r;
            k = next;
        }
        r
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Triangulates the centroids, prunes singular edges and splits the result
/// into connected components.
pub fn build_complex(potential: &BrenierPotential, stats: &CellStats, angle_threshold: f64) -> Result<LatentComplex> {
    let dim = potential.dim();
    if !(1..=3).contains(&dim) {
        return Err(Error::Usage(format!(
            "latent complex supports dimension 1 to 3, got {dim}"
        )));
    }
    if !(angle_threshold >= 0.0) {
        return Err(Error::Domain(format!(
            "angle threshold must be nonnegative, got {angle_threshold}"
        )));
    }
    if stats.centroids.len() != potential.len() {
        return Err(Error::Usage("cell statistics do not match the potential".into()));
    }
    let empty = stats.empty_cells();
    if !empty.is_empty() {
        return Err(Error::Usage(format!("empty cells {empty:?} have no centroid")));
    }
    let centroids: Vec<Vec<f64>> = stats.centroids.iter().map(|c| c.clone().unwrap()).collect();
    let n = centroids.len();
    let targets = potential.targets();

    let all = delaunay::triangulate(&centroids, dim)?;
    let candidate_edges = if all.is_empty() {
        // fewer than dim + 1 centroids: the single lower-dimensional simplex
        let v: Vec<usize> = (0..n).collect();
        delaunay::edges(&[v])
    } else {
        delaunay::edges(&all)
    };
    let keep = |i: usize, j: usize| {
        let same_label = match (targets.label(i), targets.label(j)) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        };
        same_label && target_angle(targets.point(i), targets.point(j)) <= angle_threshold
    };
    let kept_edges: Vec<(usize, usize)> = candidate_edges.into_iter().filter(|&(i, j)| keep(i, j)).collect();
    let kept_set: std::collections::BTreeSet<(usize, usize)> = kept_edges.iter().copied().collect();
    let simplices: Vec<Vec<usize>> = all
        .into_iter()
        .filter(|s| {
            delaunay::edges(std::slice::from_ref(s))
                .iter()
                .all(|e| kept_set.contains(e))
        })
        .collect();

    let mut uf = UnionFind((0..n).collect());
    for &(i, j) in &kept_edges {
        uf.union(i, j);
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        groups.entry(uf.find(i)).or_default().push(i);
    }
    let components: Vec<Vec<usize>> = groups.into_values().collect();
    let mut component_of = vec![0; n];
    for (k, c) in components.iter().enumerate() {
        for &i in c {
            component_of[i] = k;
        }
    }
    let labels = targets.labels().map(|l| components.iter().map(|c| l[c[0]]).collect());
    let simplex_components = simplices.iter().map(|s| component_of[s[0]]).collect();
    let mut complex = LatentComplex {
        dim,
        centroids,
        simplices,
        kept_edges,
        components,
        labels,
        simplex_components,
        angle_threshold,
        triangulated: 0,
        frames: Vec::new(),
    };
    complex.triangulated = delaunay::triangulate(&complex.centroids, dim)?.len();
    complex.rebuild_frames();
    Ok(complex)
}

/// Located point: simplex index and clamped barycentric weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Location {
    pub simplex: usize,
    pub weights: Vec<f64>,
}

impl LatentComplex {
    fn rebuild_frames(&mut self) {
        self.frames = self.simplices.iter().map(|s| frame(&self.centroids, s)).collect();
    }

    /// Simplices whose frame is singular; `locate` skips them.
    pub fn degenerate_simplices(&self) -> Vec<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_none())
            .map(|(k, _)| k)
            .collect()
    }

    /// Brute-force scan; the first simplex whose weights are all
    /// `>= -LOCATE_TOL` wins. `None` is the outside marker.
    pub fn locate(&self, z: &[f64]) -> Option<Location> {
        let d = self.dim;
        let mut lam = vec![0.0; d + 1];
        for (k, f) in self.frames.iter().enumerate() {
            let Some(f) = f else { continue };
            let rel = DVector::from_iterator(d, z.iter().zip(&f.origin).map(|(a, b)| a - b));
            let tail = &f.inv * rel;
            lam[0] = 1.0 - tail.sum();
            for c in 0..d {
                lam[c + 1] = tail[c];
            }
            if lam.iter().all(|&v| v >= -LOCATE_TOL) {
                let mut w: Vec<f64> = lam.iter().map(|v| v.max(0.0)).collect();
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= s);
                return Some(Location { simplex: k, weights: w });
            }
        }
        None
    }

    /// Label of a component: the target label, or the component index for
    /// unlabeled clouds.
    pub fn component_label(&self, k: usize) -> u32 {
        match &self.labels {
            Some(l) => l[k],
            None => k as u32,
        }
    }

    /// Barycentric combination of centroids.
    pub fn latent_of(&self, simplex: usize, weights: &[f64]) -> Vec<f64> {
        combine(
            self.dim,
            self.simplices[simplex].iter().map(|&i| self.centroids[i].as_slice()),
            weights,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: Self = serde_json::from_str(text)?;
        let n = c.centroids.len();
        let bad = c.centroids.iter().any(|p| p.len() != c.dim)
            || c.simplices
                .iter()
                .any(|s| s.len() != c.dim + 1 || s.iter().any(|&v| v >= n))
            || c.simplex_components.len() != c.simplices.len()
            || c.simplex_components.iter().any(|&k| k >= c.components.len())
            || c.labels.as_ref().is_some_and(|l| l.len() != c.components.len());
        if bad {
            return Err(Error::Usage("inconsistent latent complex file".into()));
        }
        c.rebuild_frames();
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn combine<'a>(dim: usize, points: impl Iterator<Item = &'a [f64]>, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (p, w) in points.zip(weights) {
        for (o, v) in out.iter_mut().zip(p) {
            *o += w * v;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarycentricSample {
    pub simplex: usize,
    pub weights: Vec<f64>,
    pub latent: Vec<f64>,
    pub output: Vec<f64>,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarycentricSamples {
    pub dim: usize,
    pub samples: Vec<BarycentricSample>,
    pub draws: usize,
    pub rejected: usize,
}

impl BarycentricSamples {
    pub fn rejection_rate(&self) -> f64 {
        if self.draws == 0 {
            0.0
        } else {
            self.rejected as f64 / self.draws as f64
        }
    }

    /// Row-major outputs.
    pub fn outputs(&self) -> Vec<f64> {
        self.samples.iter().flat_map(|s| s.output.iter().copied()).collect()
    }

    /// CSV with columns `x0..x{n-1},label,simplex_id`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let head: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).collect();
        writeln!(w, "{},label,simplex_id", head.join(","))?;
        for s in &self.samples {
            let row: Vec<String> = s.output.iter().map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{},{},{}", row.join(","), s.label, s.simplex)?;
        }
        Ok(())
    }
}

fn check_pair(complex: &LatentComplex, potential: &BrenierPotential) -> Result<()> {
    if complex.dim != potential.dim() || complex.centroids.len() != potential.len() {
        return Err(Error::Usage("latent complex does not match the potential".into()));
    }
    Ok(())
}

fn emit(
    complex: &LatentComplex,
    potential: &BrenierPotential,
    simplex: usize,
    weights: Vec<f64>,
    latent: Vec<f64>,
) -> BarycentricSample {
    let t = potential.targets();
    let output = combine(
        complex.dim,
        complex.simplices[simplex].iter().map(|&i| t.point(i)),
        &weights,
    );
    BarycentricSample {
        simplex,
        weights,
        latent,
        output,
        label: complex.component_label(complex.simplex_components[simplex]),
    }
}

/// Rejection sampler: source draws outside every simplex are discarded.
pub fn sample_unconditional(
    complex: &LatentComplex,
    potential: &BrenierPotential,
    count: usize,
    seed: u64,
) -> Result<BarycentricSamples> {
    check_pair(complex, potential)?;
    let mut out = BarycentricSamples {
        dim: complex.dim,
        samples: Vec::with_capacity(count),
        draws: 0,
        rejected: 0,
    };
    if count == 0 {
        return Ok(out);
    }
    if complex.simplices.is_empty() {
        return Err(Error::Coverage("the latent complex has no simplex".into()));
    }
    let d = complex.dim;
    let mut round = 0u64;
    while out.samples.len() < count {
        let batch = (2 * (count - out.samples.len())).clamp(rng::CHUNK, 16 * rng::CHUNK);
        let z = potential.source().sample(batch, rng::derive(seed, round));
        round += 1;
        let located: Vec<Option<Location>> = z.par_chunks(d).map(|p| complex.locate(p)).collect();
        for (p, loc) in z.chunks_exact(d).zip(located) {
            if out.samples.len() == count {
                break;
            }
            out.draws += 1;
            match loc {
                Some(l) => out
                    .samples
                    .push(emit(complex, potential, l.simplex, l.weights, p.to_vec())),
                None => out.rejected += 1,
            }
        }
        if out.draws >= COVERAGE_DRAWS && out.samples.len() as f64 <= MIN_ACCEPTANCE * out.draws as f64 {
            return Err(Error::Coverage(format!(
                "rejection rate {:.4} over {} draws; the complex covers too little of the source",
                out.rejection_rate(),
                out.draws
            )));
        }
    }
    Ok(out)
}

/// Uniformly chosen simplex of the labeled component(s), weights
/// `beta / sum(beta)` with `beta` uniform on the unit cube.
pub fn sample_conditional(
    complex: &LatentComplex,
    potential: &BrenierPotential,
    label: u32,
    count: usize,
    seed: u64,
) -> Result<BarycentricSamples> {
    check_pair(complex, potential)?;
    let known = (0..complex.components.len()).any(|k| complex.component_label(k) == label);
    if !known {
        return Err(Error::Domain(format!("unknown label {label}")));
    }
    let pool: Vec<usize> = (0..complex.simplices.len())
        .filter(|&s| complex.component_label(complex.simplex_components[s]) == label)
        .collect();
    let mut out = BarycentricSamples {
        dim: complex.dim,
        samples: Vec::with_capacity(count),
        draws: count,
        rejected: 0,
    };
    if count == 0 {
        return Ok(out);
    }
    if pool.is_empty() {
        return Err(Error::Coverage(format!("label {label} has no simplex")));
    }
    let k = complex.dim + 1;
    let draws = rng::fill_chunked(seed, count, k + 1, |r, slot| {
        for v in slot.iter_mut() {
            *v = rand::Rng::random::<f64>(r);
        }
    });
    for d in draws.chunks_exact(k + 1) {
        let pick = ((d[0] * pool.len() as f64) as usize).min(pool.len() - 1);
        let s = pool[pick];
        let total: f64 = d[1..].iter().sum();
        let weights: Vec<f64> = d[1..].iter().map(|b| b / total).collect();
        let latent = complex.latent_of(s, &weights);
        out.samples.push(emit(complex, potential, s, weights, latent));
    }
    Ok(out)
}

//! Delaunay triangulation for dimensions 1 to 3.
//!
//! 1D is the sorted chain of segments; 2D and 3D use Bowyer-Watson
//! insertion inside a large enclosing simplex.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular value below which a point set counts as flat.
const FLAT_TOL: f64 = 1e-9;

struct Cell {
    verts: Vec<usize>,
    center: Vec<f64>,
    r2: f64,
}

fn circumsphere(pts: &[Vec<f64>], verts: &[usize]) -> Option<(Vec<f64>, f64)> {
    let d = verts.len() - 1;
    let p0 = &pts[verts[0]];
    let mut a = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    for k in 0..d {
        let pk = &pts[verts[k + 1]];
        let mut rhs = 0.0;
        for c in 0..d {
            let e = pk[c] - p0[c];
            a[(k, c)] = 2.0 * e;
            rhs += e * e;
        }
        b[k] = rhs;
    }
    // center relative to p0
    let u = a.lu().solve(&b)?;
    if u.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let r2 = u.norm_squared();
    Some(((0..d).map(|c| p0[c] + u[c]).collect(), r2))
}

/// Affine rank check: errors when `points` do not span `dim` dimensions.
pub fn check_full_rank(points: &[Vec<f64>], dim: usize) -> Result<()> {
    let n = points.len();
    let mean: Vec<f64> = (0..dim)
        .map(|c| points.iter().map(|p| p[c]).sum::<f64>() / n as f64)
        .collect();
    let m = DMatrix::from_fn(n, dim, |i, c| points[i][c] - mean[c]);
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= FLAT_TOL * max {
        return Err(Error::Degeneracy(format!(
            "centroids span fewer than {dim} dimensions (singular values {min:e} / {max:e})"
        )));
    }
    Ok(())
}

/// Delaunay simplices as sorted vertex tuples of length `dim + 1`.
/// Fewer than `dim + 1` points give no simplices.
pub fn triangulate(points: &[Vec<f64>], dim: usize) -> Result<Vec<Vec<usize>>> {
    let n = points.len();
    if n < dim + 1 {
        return Ok(Vec::new());
    }
    if dim == 1 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]));
        if points[order[0]][0] == points[order[n - 1]][0] {
            return Err(Error::Degeneracy("all centroids coincide".into()));
        }
        let mut out: Vec<Vec<usize>> = order
            .windows(2)
            .filter(|w| points[w[0]][0] < points[w[1]][0])
            .map(|w| {
                let mut s = vec![w[0], w[1]];
                s.sort_unstable();
                s
            })
            .collect();
        out.sort();
        return Ok(out);
    }
    check_full_rank(points, dim)?;

    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in points {
        for c in 0..dim {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let center: Vec<f64> = (0..dim).map(|c| 0.5 * (lo[c] + hi[c])).collect();
    let extent = (0..dim).map(|c| hi[c] - lo[c]).fold(0.0, f64::max).max(1e-12);
    let r = 1e3 * extent;
    // the simplex {x >= c - r, sum(x - c + r) <= 3 d r} contains the ball of
    // radius r around c
    let mut pts: Vec<Vec<f64>> = points.to_vec();
    let base: Vec<f64> = center.iter().map(|c| c - r).collect();
    pts.push(base.clone());
    for k in 0..dim {
        let mut v = base.clone();
        v[k] += 3.0 * dim as f64 * r;
        pts.push(v);
    }
    let sup: Vec<usize> = (n..n + dim + 1).collect();
    let (c0, r0) = circumsphere(&pts, &sup).expect("enclosing simplex is regular");
    let mut cells = vec![Cell {
        verts: sup,
        center: c0,
        r2: r0,
    }];

    for p in 0..n {
        let x = &pts[p];
        let (bad, good): (Vec<Cell>, Vec<Cell>) = cells.into_iter().partition(|c| {
            let d2: f64 = c.center.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            d2 < c.r2 * (1.0 + 1e-12)
        });
        let mut facets: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for c in &bad {
            for skip in 0..=dim {
                let f: Vec<usize> = c
                    .verts
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != skip)
                    .map(|(_, v)| *v)
                    .collect();
                *facets.entry(f).or_insert(0) += 1;
            }
        }
        cells = good;
        for (f, count) in facets {
            if count != 1 {
                continue;
            }
            let mut verts = f;
            verts.push(p);
            verts.sort_unstable();
            let (center, r2) = circumsphere(&pts, &verts)
                .ok_or_else(|| Error::Degeneracy(format!("point {p} is affinely dependent on a cavity facet")))?;
            cells.push(Cell { verts, center, r2 });
        }
    }
    let mut out: Vec<Vec<usize>> = cells
        .into_iter()
        .filter(|c| c.verts.iter().all(|&v| v < n))
        .map(|c| c.verts)
        .collect();
    out.sort();
    Ok(out)
}

/// Undirected edges of a simplex list, as sorted pairs in sorted order.
pub fn edges(simplices: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let mut e: Vec<(usize, usize)> = simplices
        .iter()
        .flat_map(|s| {
            let s = s.clone();
            (0..s.len()).flat_map(move |a| {
                let s = s.clone();
                (a + 1..s.len()).map(move |b| (s[a].min(s[b]), s[a].max(s[b])))
            })
        })
        .collect();
    e.sort_unstable();
    e.dedup();
    e
}

//! Exact discrete transport between weighted point sets by successive
//! shortest augmenting paths on the dense bipartite residual graph.

/// Returns the optimal plan as `(i, j, mass)` triples.
///
/// `a` and `b` must have equal totals. Reduced costs are kept nonnegative
/// with node potentials, so each search is a plain dense Dijkstra.
pub fn solve(a: &[f64], b: &[f64], cost: &[f64]) -> Vec<(usize, usize, f64)> {
    let n = a.len();
    let m = b.len();
    assert_eq!(cost.len(), n * m);
    let total: f64 = a.iter().sum();
    let tiny = 1e-14 * total.max(1e-300);

    let mut supply = a.to_vec();
    // totals agree only up to rounding; match them exactly
    let scale = total / b.iter().sum::<f64>();
    let mut demand: Vec<f64> = b.iter().map(|v| v * scale).collect();
    let mut flow = vec![0.0; n * m];
    // potentials: sources then sinks
    let mut pot = vec![0.0; n + m];
    // initial feasible potentials: pot_j = min_i c_ij
    for j in 0..m {
        pot[n + j] = (0..n).map(|i| cost[i * m + j]).fold(f64::INFINITY, f64::min);
    }

    let mut dist = vec![f64::INFINITY; n + m];
    let mut done = vec![false; n + m];
    let mut prev = vec![usize::MAX; n + m];

    loop {
        let active: usize = supply.iter().filter(|&&s| s > tiny).count();
        if active == 0 {
            break;
        }
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        done.iter_mut().for_each(|d| *d = false);
        prev.iter_mut().for_each(|p| *p = usize::MAX);
        for i in 0..n {
            if supply[i] > tiny {
                dist[i] = 0.0;
            }
        }
        let sink = loop {
            // dense selection of the closest unsettled node
            let mut best = usize::MAX;
            let mut bd = f64::INFINITY;
            for (v, (&d, &fin)) in dist.iter().zip(&done).enumerate() {
                if !fin && d < bd {
                    bd = d;
                    best = v;
                }
            }
            if best == usize::MAX {
                break None;
            }
            done[best] = true;
            if best < n {
                let i = best;
                let row = &cost[i * m..(i + 1) * m];
                for (j, &c) in row.iter().enumerate() {
                    let v = n + j;
                    if done[v] {
                        continue;
                    }
                    let rc = (c + pot[i] - pot[v]).max(0.0);
                    if bd + rc < dist[v] {
                        dist[v] = bd + rc;
                        prev[v] = i;
                    }
                }
            } else {
                let j = best - n;
                if demand[j] > tiny {
                    break Some(j);
                }
                for i in 0..n {
                    if done[i] || flow[i * m + j] <= 0.0 {
                        continue;
                    }
                    let rc = (-cost[i * m + j] + pot[best] - pot[i]).max(0.0);
                    if bd + rc < dist[i] {
                        dist[i] = bd + rc;
                        prev[i] = best;
                    }
                }
            }
        };
        let Some(sink) = sink else {
            let left: f64 = supply.iter().sum();
            assert!(left <= 1e-9 * total, "transport problem infeasible: unequal masses");
            break;
        };
        let ds = dist[n + sink];
        for v in 0..n + m {
            pot[v] += dist[v].min(ds);
        }
        // bottleneck along the path
        let mut amount = demand[sink];
        let mut v = n + sink;
        loop {
            let u = prev[v];
            if u == usize::MAX {
                amount = amount.min(supply[v]);
                break;
            }
            if u >= n {
                // backward edge: source v <- sink u
                amount = amount.min(flow[v * m + (u - n)]);
            }
            v = u;
        }
        let mut v = n + sink;
        loop {
            let u = prev[v];
            if u == usize::MAX {
                supply[v] -= amount;
                break;
            }
            if u < n {
                flow[u * m + (v - n)] += amount;
            } else {
                let f = &mut flow[v * m + (u - n)];
                *f -= amount;
                if *f < tiny {
                    *f = 0.0;
                }
            }
            v = u;
        }
        demand[sink] -= amount;
        if demand[sink] < tiny {
            demand[sink] = 0.0;
        }
    }
    let mut plan = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let f = flow[i * m + j];
            if f > 0.0 {
                plan.push((i, j, f));
            }
        }
    }
    plan
}

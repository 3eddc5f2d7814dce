//! Exact transport on the line: the monotone coupling of the two quantile
//! functions.

fn sorted_cumulative(x: &[f64], w: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&p, &q| x[p].total_cmp(&x[q]).then(p.cmp(&q)));
    let mut acc = 0.0;
    let mut cum: Vec<f64> = idx
        .iter()
        .map(|&i| {
            acc += w[i];
            acc
        })
        .collect();
    // both laws end at exactly 1 so the merge below terminates together
    *cum.last_mut().unwrap() = 1.0;
    (idx, cum)
}

/// Merges the two cumulative distribution breakpoints.
pub fn solve(xa: &[f64], wa: &[f64], xb: &[f64], wb: &[f64]) -> Vec<(usize, usize, f64)> {
    let (ia, ca) = sorted_cumulative(xa, wa);
    let (ib, cb) = sorted_cumulative(xb, wb);
    let mut plan = Vec::with_capacity(ia.len() + ib.len());
    let (mut p, mut q) = (0, 0);
    let mut prev = 0.0;
    while p < ia.len() && q < ib.len() {
        let next = ca[p].min(cb[q]);
        if next > prev {
            plan.push((ia[p], ib[q], next - prev));
            prev = next;
        }
        if ca[p] <= next {
            p += 1;
        }
        if cb[q] <= next {
            q += 1;
        }
    }
    plan
}

//! Dense linear sum assignment by shortest augmenting paths (Crouse's
//! variant of Jonker-Volgenant).

/// Minimizes `sum_i cost[i][perm[i]]` over permutations of a square matrix
/// given row-major. Returns `perm` (row -> column).
pub fn solve(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return Vec::new();
    }
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut shortest = vec![f64::INFINITY; n];
    let mut path = vec![NONE; n];
    let mut col4row = vec![NONE; n];
    let mut row4col = vec![NONE; n];
    let mut seen_rows = vec![false; n];
    let mut seen_cols = vec![false; n];
    let mut remaining = vec![0usize; n];

    for cur_row in 0..n {
        shortest.iter_mut().for_each(|s| *s = f64::INFINITY);
        seen_rows.iter_mut().for_each(|s| *s = false);
        seen_cols.iter_mut().for_each(|s| *s = false);
        // reversed so ties prefer low column indices
        for (k, r) in remaining.iter_mut().enumerate() {
            *r = n - 1 - k;
        }
        let mut num_remaining = n;
        let mut min_val = 0.0;
        let mut i = cur_row;
        let sink = loop {
            seen_rows[i] = true;
            let mut index = NONE;
            let mut lowest = f64::INFINITY;
            let row = &cost[i * n..(i + 1) * n];
            for (it, &j) in remaining[..num_remaining].iter().enumerate() {
                let r = min_val + row[j] - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == NONE) {
                    lowest = shortest[j];
                    index = it;
                }
            }
            min_val = lowest;
            assert!(min_val.is_finite(), "assignment infeasible: non-finite costs");
            let j = remaining[index];
            seen_cols[j] = true;
            num_remaining -= 1;
            remaining[index] = remaining[num_remaining];
            if row4col[j] == NONE {
                break j;
            }
            i = row4col[j];
        };

        u[cur_row] += min_val;
        for r in 0..n {
            if seen_rows[r] && r != cur_row {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for c in 0..n {
            if seen_cols[c] {
                v[c] -= min_val - shortest[c];
            }
        }
        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur_row {
                break;
            }
        }
    }
    col4row
}

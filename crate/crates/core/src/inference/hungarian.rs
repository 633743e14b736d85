//! Minimum-cost linear assignment (Kuhn-Munkres with potentials, O(n^3)).

use crate::error::{Error, Result};

/// Optimal assignment for a square cost matrix: `assignment[row] = column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = cost.len();
    if let Some(row) = cost.iter().find(|r| r.len() != n) {
        return Err(Error::DimensionMismatch { expected: n, got: row.len() });
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::ParamOutOfRange("assignment costs must be finite".into()));
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[matched_row[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((assignment, total))
}

/// Rectangular assignment: the matrix is padded to square with `no_match`
/// entries. Returns, for every row, the matched column if any.
pub fn assign_rectangular(cost: &[Vec<f64>], no_match: f64) -> Result<Vec<Option<usize>>> {
    let rows = cost.len();
    let cols = cost.first().map(|r| r.len()).unwrap_or(0);
    if let Some(r) = cost.iter().find(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch { expected: cols, got: r.len() });
    }
    let n = rows.max(cols);
    let square: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i < rows && j < cols { cost[i][j] } else { no_match }).collect())
        .collect();
    let (a, _) = hungarian(&square)?;
    Ok((0..rows)
        .map(|i| {
            let j = a[i];
            (j < cols && cost[i][j] <= no_match).then_some(j)
        })
        .collect())
}

/// Default no-match cost: twice the median pairwise cost.
pub fn median_no_match_cost(cost: &[Vec<f64>]) -> f64 {
    let mut all: Vec<f64> = cost.iter().flatten().cloned().collect();
    if all.is_empty() {
        return 0.0;
    }
    all.sort_by(|a, b| a.total_cmp(b));
    let m = all.len();
    let median = if m % 2 == 1 { all[m / 2] } else { 0.5 * (all[m / 2 - 1] + all[m / 2]) };
    2.0 * median
}

//! Minimum-cost perfect matching on square cost matrices.
//!
//! Under ties only the optimal total cost is guaranteed; which optimal
//! permutation comes back is an implementation detail.

use crate::error::{Error, Result};

/// Largest matrix [`brute_force_assignment`] accepts (8! permutations).
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Square, finite, non-negative cost matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    size: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let size = rows.len();
        if size == 0 {
            return Err(Error::usage("cost matrix must have at least one row"));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != size) {
            return Err(Error::usage(format!(
                "cost matrix must be square: {size} rows but a row of length {}",
                bad.len()
            )));
        }
        Self::from_flat(size, rows.into_iter().flatten().collect())
    }

    pub fn from_flat(size: usize, costs: Vec<f64>) -> Result<Self> {
        if size == 0 || costs.len() != size * size {
            return Err(Error::usage(format!(
                "cost matrix must be square: {} entries for size {size}",
                costs.len()
            )));
        }
        if let Some(bad) = costs.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(Error::usage(format!(
                "cost entries must be finite and non-negative, found {bad}"
            )));
        }
        Ok(CostMatrix { size, costs })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.costs[row * self.size + col]
    }

    /// Sum of `cost[p, perm[p]]` in row order.
    pub fn total(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(p, &q)| self.get(p, q)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `perm[p]` is the column matched to row `p`.
    pub perm: Vec<usize>,
    pub total_cost: f64,
}

/// Kuhn–Munkres with row/column potentials and shortest augmenting paths,
/// O(n³).
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let n = cost.size();
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = row_of_col[col0];
            let mut delta = f64::INFINITY;
            let mut next = 0usize;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost.get(r - 1, col - 1) - u[r] - v[col];
                if reduced < min_slack[col] {
                    min_slack[col] = reduced;
                    way[col] = col0;
                }
                if min_slack[col] < delta {
                    delta = min_slack[col];
                    next = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[row_of_col[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_slack[col] -= delta;
                }
            }
            col0 = next;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        // unwind the augmenting path
        loop {
            let prev = way[col0];
            row_of_col[col0] = row_of_col[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for col in 1..=n {
        perm[row_of_col[col] - 1] = col - 1;
    }
    let total_cost = cost.total(&perm);
    Assignment { perm, total_cost }
}

/// Exhaustive search over all permutations; the test oracle for [`hungarian`].
pub fn brute_force_assignment(cost: &CostMatrix) -> Result<Assignment> {
    let n = cost.size();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::usage(format!(
            "brute-force assignment limited to {BRUTE_FORCE_LIMIT}×{BRUTE_FORCE_LIMIT}, got {n}×{n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = Assignment {
        total_cost: cost.total(&perm),
        perm: perm.clone(),
    };
    // Heap's algorithm, iterative form
    let mut counters = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            let j = if i % 2 == 0 { 0 } else { counters[i] };
            perm.swap(j, i);
            let total = cost.total(&perm);
            if total < best.total_cost {
                best = Assignment {
                    perm: perm.clone(),
                    total_cost: total,
                };
            }
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

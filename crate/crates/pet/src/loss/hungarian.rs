//! Minimum-cost bipartite assignment by shortest augmenting paths.

use crate::error::{Error, Result};

/// Rectangular cost matrix: `rows` queries x `cols` ground-truth points.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dim(format!(
                "cost matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite cost entry {bad}")));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Assign every column to a distinct row minimizing total cost (requires
/// `rows >= cols`). Returns `assignment[col] = row`.
///
/// Cost ties are resolved deterministically: row scans run in increasing
/// index order and augmentation prefers free rows, so an all-zero matrix
/// yields the identity assignment.
pub fn assign(cost: &CostMatrix) -> Result<Vec<usize>> {
    let (n_rows, n_cols) = (cost.rows, cost.cols);
    if n_rows < n_cols {
        return Err(Error::Contract(format!(
            "assignment needs at least as many rows as columns ({n_rows} < {n_cols})"
        )));
    }
    if n_cols == 0 {
        return Ok(Vec::new());
    }

    // Shortest-augmenting-path with dual potentials, one column at a time.
    // Internally 1-based; slot 0 is the virtual start.
    let m = n_rows;
    let mut u = vec![0.0; n_cols + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1]; // owner[row] = column (1-based), 0 = free
    let mut way = vec![0usize; m + 1];

    for col in 1..=n_cols {
        owner[0] = col;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.at(j - 1, i0 - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                let better = minv[j] < delta
                    || (minv[j] == delta && owner[j] == 0 && j1 != 0 && owner[j1] != 0);
                if better {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![usize::MAX; n_cols];
    for row in 1..=m {
        if owner[row] != 0 {
            assignment[owner[row] - 1] = row - 1;
        }
    }
    debug_assert!(assignment.iter().all(|&r| r != usize::MAX));
    Ok(assignment)
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &CostMatrix, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(col, &row)| cost.at(row, col))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_hand_case() {
        // [[1,2],[3,0]]: optimal picks 1 + 0
        let c = CostMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 0.0]).unwrap();
        let a = assign(&c).unwrap();
        assert_eq!(a, vec![0, 1]);
        assert_eq!(assignment_cost(&c, &a), 1.0);
    }

    #[test]
    fn zero_matrix_gives_identity_by_tie_break() {
        let c = CostMatrix::new(3, 3, vec![0.0; 9]).unwrap();
        assert_eq!(assign(&c).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn rectangular_tall_matrix() {
        let c = CostMatrix::new(4, 2, vec![5.0, 9.0, 1.0, 2.0, 7.0, 1.0, 3.0, 8.0]).unwrap();
        let a = assign(&c).unwrap();
        assert_eq!(assignment_cost(&c, &a), 2.0); // rows 1 and 2
        assert_eq!(a, vec![1, 2]);
    }

    #[test]
    fn more_columns_than_rows_is_contract_error() {
        let c = CostMatrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(assign(&c).is_err());
    }

    #[test]
    fn non_finite_cost_is_contract_error() {
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }
}

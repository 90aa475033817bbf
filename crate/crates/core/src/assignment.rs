//! Linear sum assignment (Kuhn-Munkres with shortest augmenting paths).

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// Sorted ascending.
    pub row_indices: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub total_cost: f64,
}

impl AssignmentResult {
    pub fn len(&self) -> usize {
        self.row_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_indices.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row_indices
            .iter()
            .copied()
            .zip(self.col_indices.iter().copied())
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs.
///
/// Rectangular inputs are padded to square with a constant row or column
/// (the matrix maximum) whose pairs are discarded afterwards. Rows are
/// augmented in ascending order and the lowest column wins among equal
/// reduced costs, so ties resolve the same way on every run.
pub fn hungarian(cost: ArrayView2<'_, f64>) -> Result<AssignmentResult> {
    let (rows, cols) = cost.dim();
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("cost matrix contains NaN or infinite entries"));
    }
    if rows == 0 || cols == 0 {
        return Ok(AssignmentResult {
            row_indices: Vec::new(),
            col_indices: Vec::new(),
            total_cost: 0.0,
        });
    }

    let n = rows.max(cols);
    let pad = cost.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut square = Array2::from_elem((n, n), pad);
    square.slice_mut(ndarray::s![..rows, ..cols]).assign(&cost);

    let col_of_row = solve_square(&square);

    let mut row_indices = Vec::with_capacity(rows.min(cols));
    let mut col_indices = Vec::with_capacity(rows.min(cols));
    let mut total_cost = 0.0;
    for (r, &c) in col_of_row.iter().enumerate().take(rows) {
        if c < cols {
            row_indices.push(r);
            col_indices.push(c);
            total_cost += cost[[r, c]];
        }
    }
    Ok(AssignmentResult {
        row_indices,
        col_indices,
        total_cost,
    })
}

/// Returns the column assigned to each row of a square matrix.
fn solve_square(a: &Array2<f64>) -> Vec<usize> {
    let n = a.nrows();
    // 1-based potentials; index 0 is the virtual root column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a[[i0 - 1, j - 1]] - u[i0] - v[j];
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
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    col_of_row
}

//! Compressed sparse row matrices, just enough for adjacency products.

use crate::error::{Error, Result};
use crate::numcore::matrix::Matrix;

/// Symmetric sparse matrix in CSR form. Only used for normalized adjacency
/// operators, which are symmetric by construction; the backward pass of the
/// sparse product relies on that symmetry.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Build from an unordered list of `(row, col, value)` entries.
    /// Duplicate coordinates are summed.
    pub fn from_entries(
        rows: usize,
        cols: usize,
        mut entries: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        for &(r, c, _) in &entries {
            if r >= rows || c >= cols {
                return Err(Error::Shape(format!(
                    "sparse entry ({r},{c}) outside {rows}x{cols}"
                )));
            }
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            if col_idx.last() == Some(&c) && row_ptr[r + 1] > row_ptr[r] && {
                let last_in_row = row_ptr[r + 1] - 1 == col_idx.len() - 1;
                last_in_row
            } {
                *vals.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                vals.push(v);
                row_ptr[r + 1] = col_idx.len();
            }
        }
        // Fill row_ptr for empty trailing rows.
        for r in 0..rows {
            if row_ptr[r + 1] < row_ptr[r] {
                row_ptr[r + 1] = row_ptr[r];
            }
        }
        Ok(SparseMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            vals,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `self * dense`.
    pub fn mul_dense(&self, dense: &Matrix) -> Result<Matrix> {
        if self.cols != dense.rows() {
            return Err(Error::Shape(format!(
                "sparse mul: {}x{} * {}x{}",
                self.rows,
                self.cols,
                dense.rows(),
                dense.cols()
            )));
        }
        Ok(self.mul_dense_unchecked(dense))
    }

    pub(crate) fn mul_dense_unchecked(&self, dense: &Matrix) -> Matrix {
        let m = dense.cols();
        let mut out = Matrix::zeros(self.rows, m);
        for r in 0..self.rows {
            let start = self.row_ptr[r];
            let end = self.row_ptr[r + 1];
            let out_row = out.row_mut(r);
            for k in start..end {
                let c = self.col_idx[k];
                let v = self.vals[k];
                for (o, &d) in out_row.iter_mut().zip(dense.row(c)) {
                    *o += v * d;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.set(r, self.col_idx[k], self.vals[k]);
            }
        }
        out
    }
}

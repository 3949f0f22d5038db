//! Compressed-sparse-row matrices used as constant operands on the tape.
//!
//! Only the dense side of a sparse-dense product is ever differentiated; the
//! sparse side (normalized adjacency, binary feature matrix) stays fixed for
//! the duration of a forward pass.

use crate::error::{Error, Result};

/// Immutable CSR matrix of `f64`.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl SparseMatrix {
    /// Build from (row, col, value) triplets. Duplicate positions are summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        for &(r, c, _) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::Dimension(format!(
                    "triplet ({r},{c}) outside {rows}x{cols}"
                )));
            }
        }
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for &(r, c, v) in triplets {
            per_row[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for row in &mut per_row {
            row.sort_unstable_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for &(c, v) in row.iter() {
                if last == Some(c) {
                    *data.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    data.push(v);
                    last = Some(c);
                }
            }
            indptr.push(indices.len());
        }
        Ok(SparseMatrix {
            rows,
            cols,
            indptr,
            indices,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            data: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.data[span].iter().copied())
    }

    /// Dense product `self * x` where x is row-major `self.cols x xcols`.
    pub fn mul_dense(&self, x: &[f64], xcols: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols * xcols);
        let mut out = vec![0.0; self.rows * xcols];
        for r in 0..self.rows {
            let dst = &mut out[r * xcols..(r + 1) * xcols];
            for (c, v) in self.row_entries(r) {
                let src = &x[c * xcols..(c + 1) * xcols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }

    /// Dense product `self^T * g` where g is row-major `self.rows x gcols`.
    pub fn mul_dense_transposed(&self, g: &[f64], gcols: usize) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.rows * gcols);
        let mut out = vec![0.0; self.cols * gcols];
        for r in 0..self.rows {
            let src = &g[r * gcols..(r + 1) * gcols];
            for (c, v) in self.row_entries(r) {
                let dst = &mut out[c * gcols..(c + 1) * gcols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                out[r * self.cols + c] = v;
            }
        }
        out
    }
}

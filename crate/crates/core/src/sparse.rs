//! Compressed sparse row matrices used for graph propagation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Build from per-row `(column, value)` lists. Columns inside a row are
    /// kept in the given order.
    pub fn from_row_lists(rows: usize, cols: usize, lists: &[Vec<(usize, f64)>]) -> Result<Self> {
        if lists.len() != rows {
            return Err(shape_err(
                "Csr::from_row_lists",
                format!("{} row lists for {rows} rows", lists.len()),
            ));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for list in lists {
            for &(c, v) in list {
                if c >= cols {
                    return Err(shape_err(
                        "Csr::from_row_lists",
                        format!("column {c} out of {cols}"),
                    ));
                }
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    /// Rows whose entries are `1/sqrt(len)` for every listed column.
    pub fn sym_row_normalized(rows: usize, cols: usize, neighbors: &[Vec<usize>]) -> Result<Self> {
        let lists: Vec<Vec<(usize, f64)>> = neighbors
            .iter()
            .map(|n| {
                let w = if n.is_empty() {
                    0.0
                } else {
                    1.0 / libm::sqrt(n.len() as f64)
                };
                n.iter().map(|&c| (c, w)).collect()
            })
            .collect();
        Self::from_row_lists(rows, cols, &lists)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                t.set(r, c, t.get(r, c) + v);
            }
        }
        t
    }

    /// `self * x`.
    pub fn matmul(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.cols {
            return Err(shape_err(
                "Csr::matmul",
                format!("{}x{} * {}x{}", self.rows, self.cols, x.rows(), x.cols()),
            ));
        }
        let d = x.cols();
        let mut out = Tensor::zeros(self.rows, d);
        for r in 0..self.rows {
            let mut acc = vec![0.0; d];
            for (c, v) in self.row(r) {
                for (a, b) in acc.iter_mut().zip(x.row(c)) {
                    *a += v * b;
                }
            }
            out.row_mut(r).copy_from_slice(&acc);
        }
        Ok(out)
    }

    /// `self^T * g`.
    pub fn t_matmul(&self, g: &Tensor) -> Result<Tensor> {
        if g.rows() != self.rows {
            return Err(shape_err(
                "Csr::t_matmul",
                format!("({}x{})^T * {}x{}", self.rows, self.cols, g.rows(), g.cols()),
            ));
        }
        let d = g.cols();
        let mut out = Tensor::zeros(self.cols, d);
        for r in 0..self.rows {
            let g_row = g.row(r);
            for (c, v) in self.row(r) {
                for (o, b) in out.row_mut(c).iter_mut().zip(g_row) {
                    *o += v * b;
                }
            }
        }
        Ok(out)
    }
}

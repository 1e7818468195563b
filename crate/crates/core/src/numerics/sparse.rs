use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-indexed sparse matrix: each row holds `(column, weight)` pairs sorted
/// by column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SparseMatrix<T> {
    cols: usize,
    rows: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> SparseMatrix<T> {
    pub fn new(cols: usize, mut rows: Vec<Vec<(usize, T)>>) -> Result<Self> {
        for row in &mut rows {
            if row.iter().any(|&(c, w)| c >= cols || !w.is_finite()) {
                return Err(Error::Contract("sparse entry out of range or non-finite".into()));
            }
            row.sort_by_key(|&(c, _)| c);
        }
        Ok(Self { cols, rows })
    }

    pub fn from_dense(m: &Matrix<T>) -> Self {
        let rows = (0..m.rows())
            .map(|r| {
                m.row(r)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != T::zero())
                    .map(|(c, &v)| (c, v))
                    .collect()
            })
            .collect();
        Self { cols: m.cols(), rows }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            cols: n,
            rows: (0..n).map(|i| vec![(i, T::one())]).collect(),
        }
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[(usize, T)] {
        &self.rows[r]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[(usize, T)]> {
        self.rows.iter().map(Vec::as_slice)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.rows.len(), self.cols);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, w) in row {
                m.set(r, c, w);
            }
        }
        m
    }

    /// Permutes rows and columns: entry `(i, j)` moves to `(perm[i], perm[j])`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut rows = vec![Vec::new(); self.rows.len()];
        for (i, row) in self.rows.iter().enumerate() {
            rows[perm[i]] = row.iter().map(|&(c, w)| (perm[c], w)).collect();
            rows[perm[i]].sort_by_key(|&(c, _)| c);
        }
        Self { cols: self.cols, rows }
    }

    /// `S · X`
    pub fn mul_dense(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != x.rows() {
            return Err(Error::dim("sparse_matmul", (self.rows.len(), self.cols), x.shape()));
        }
        let mut out = Matrix::zeros(self.rows.len(), x.cols());
        self.mul_dense_into(x.as_slice(), x.cols(), out.as_mut_slice());
        Ok(out)
    }

    /// Row-major kernel: `out += S · x` where `x` has `width` columns.
    pub(crate) fn mul_dense_into(&self, x: &[T], width: usize, out: &mut [T]) {
        for (r, row) in self.rows.iter().enumerate() {
            let dst = &mut out[r * width..(r + 1) * width];
            for &(c, w) in row {
                let src = &x[c * width..(c + 1) * width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }

    /// `Sᵀ · G`
    pub fn t_mul_dense(&self, g: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows.len() != g.rows() {
            return Err(Error::dim("sparse_t_matmul", (self.rows.len(), self.cols), g.shape()));
        }
        let width = g.cols();
        let mut out = Matrix::zeros(self.cols, width);
        {
            let o = out.as_mut_slice();
            for (r, row) in self.rows.iter().enumerate() {
                let src = g.row(r);
                for &(c, w) in row {
                    let dst = &mut o[c * width..(c + 1) * width];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        Ok(out)
    }
}

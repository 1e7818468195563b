//! Dense factorizations used by the diffusion kernel and the ridge solvers.

use super::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// LU factorization with partial pivoting, `P·A = L·U`.
pub struct Lu<T> {
    lu: Matrix<T>,
    perm: Vec<usize>,
}

impl<T: Scalar> Lu<T> {
    pub fn factor(a: &Matrix<T>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::dim("lu", a.shape(), a.shape()));
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.max_abs().max(T::min_positive_value());
        let tiny = scale * T::epsilon() * T::lit(n.max(1) as f64);
        for k in 0..n {
            let (p, pv) = (k..n)
                .map(|i| (i, lu.get(i, k).abs()))
                .fold((k, T::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pv <= tiny {
                return Err(Error::Numerical(format!(
                    "singular matrix: pivot {} at column {k} (scale {})",
                    pv, scale
                )));
            }
            if p != k {
                perm.swap(p, k);
                for c in 0..n {
                    let t = lu.get(p, c);
                    lu.set(p, c, lu.get(k, c));
                    lu.set(k, c, t);
                }
            }
            let pivot = lu.get(k, k);
            for i in k + 1..n {
                let f = lu.get(i, k) / pivot;
                lu.set(i, k, f);
                if f == T::zero() {
                    continue;
                }
                for c in k + 1..n {
                    let v = lu.get(i, c) - f * lu.get(k, c);
                    lu.set(i, c, v);
                }
            }
        }
        Ok(Self { lu, perm })
    }

    /// Solves `A · X = B` column by column.
    pub fn solve(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        let n = self.lu.rows();
        if b.rows() != n {
            return Err(Error::dim("lu_solve", self.lu.shape(), b.shape()));
        }
        let m = b.cols();
        let mut x = Matrix::zeros(n, m);
        for i in 0..n {
            x.row_mut(i).copy_from_slice(b.row(self.perm[i]));
        }
        for i in 0..n {
            for k in 0..i {
                let f = self.lu.get(i, k);
                if f == T::zero() {
                    continue;
                }
                for c in 0..m {
                    let v = x.get(i, c) - f * x.get(k, c);
                    x.set(i, c, v);
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let f = self.lu.get(i, k);
                if f == T::zero() {
                    continue;
                }
                for c in 0..m {
                    let v = x.get(i, c) - f * x.get(k, c);
                    x.set(i, c, v);
                }
            }
            let d = self.lu.get(i, i);
            for c in 0..m {
                let v = x.get(i, c) / d;
                x.set(i, c, v);
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Result<Matrix<T>> {
        self.solve(&Matrix::identity(self.lu.rows()))
    }
}

/// Infinity-norm condition number `‖A‖∞ · ‖A⁻¹‖∞`.
pub fn condition_inf<T: Scalar>(a: &Matrix<T>, inverse: &Matrix<T>) -> T {
    let norm = |m: &Matrix<T>| {
        (0..m.rows())
            .map(|r| m.row(r).iter().map(|v| v.abs()).sum::<T>())
            .fold(T::zero(), T::max)
    };
    norm(a) * norm(inverse)
}

/// Cholesky factor `L` of a symmetric positive definite matrix.
pub fn cholesky<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dim("cholesky", a.shape(), a.shape()));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d <= T::zero() {
            return Err(Error::Numerical(format!(
                "matrix not positive definite at column {j}"
            )));
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let (ri, rj) = (l.row(i), l.row(j));
            let s = super::matrix::dot(&ri[..j], &rj[..j]);
            l.set(i, j, (a.get(i, j) - s) / d);
        }
    }
    Ok(l)
}

/// Solves `L·Lᵀ·X = B` given the Cholesky factor.
pub fn cholesky_solve<T: Scalar>(l: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let n = l.rows();
    if b.rows() != n {
        return Err(Error::dim("cholesky_solve", l.shape(), b.shape()));
    }
    let m = b.cols();
    let mut x = b.clone();
    for c in 0..m {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    Ok(x)
}

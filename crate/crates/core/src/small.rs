//! Row-major dense complex matrices for the tiny (rank-sized) blocks that sit
//! in inner loops, where the per-call overhead of a general library shows.
//! Large matrices go through `faer`.

use crate::cpx::C64;
use crate::error::{LabError, Result};
use faer::Mat;
use std::ops::{Index, IndexMut};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

#[derive(Debug, Clone, PartialEq)]
pub struct Small {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl Index<(usize, usize)> for Small {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Small {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Small {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Small {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn from_faer(m: &Mat<C64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    pub fn to_faer(&self) -> Mat<C64> {
        Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn adjoint(&self) -> Small {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn transpose(&self) -> Small {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn conj(&self) -> Small {
        Self::from_fn(self.rows, self.cols, |i, j| self[(i, j)].conj())
    }

    pub fn matmul(&self, other: &Small) -> Small {
        let mut out = Small::zeros(self.rows, other.cols);
        matmul_into(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.cols,
        );
        out
    }

    pub fn scale(&self, s: C64) -> Small {
        Small {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Small) -> Small {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Small {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Small) -> Small {
        self.add(&other.scale(-ONE))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.norm()).fold(0.0, f64::max)
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Rows `r` and columns `c` of `self`, in the given order.
    pub fn select(&self, r: &[usize], c: &[usize]) -> Small {
        Self::from_fn(r.len(), c.len(), |i, j| self[(r[i], c[j])])
    }

    pub fn inverse(&self) -> Result<Small> {
        let n = self.rows;
        if n != self.cols {
            return Err(LabError::DimensionMismatch {
                expected: n,
                got: self.cols,
            });
        }
        let mut out = Small::zeros(n, n);
        let mut work = self.data.clone();
        if !invert_into(&mut work, &mut out.data, n) {
            return Err(LabError::SingularInput("matrix is singular".into()));
        }
        Ok(out)
    }

    pub fn det(&self) -> C64 {
        let n = self.rows;
        let mut work = self.data.clone();
        lu_det(&mut work, n)
    }
}

/// `out = a (m×k) · b (k×n)`, all row-major.
pub fn matmul_into(a: &[C64], b: &[C64], out: &mut [C64], m: usize, k: usize, n: usize) {
    for x in out[..m * n].iter_mut() {
        *x = ZERO;
    }
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == ZERO {
                continue;
            }
            let row = &b[p * n..p * n + n];
            let dst = &mut out[i * n..i * n + n];
            for (d, &bv) in dst.iter_mut().zip(row) {
                *d += aip * bv;
            }
        }
    }
}

/// `out = aᴴ (a is k×m) · b (k×n)`.
pub fn adj_matmul_into(a: &[C64], b: &[C64], out: &mut [C64], k: usize, m: usize, n: usize) {
    for x in out[..m * n].iter_mut() {
        *x = ZERO;
    }
    for p in 0..k {
        let brow = &b[p * n..p * n + n];
        for i in 0..m {
            let a_pi = a[p * m + i].conj();
            if a_pi == ZERO {
                continue;
            }
            let dst = &mut out[i * n..i * n + n];
            for (d, &bv) in dst.iter_mut().zip(brow) {
                *d += a_pi * bv;
            }
        }
    }
}

/// Gauss-Jordan inverse with partial pivoting. `a` is destroyed.
/// Returns false when a pivot vanishes.
pub fn invert_into(a: &mut [C64], inv: &mut [C64], n: usize) -> bool {
    for i in 0..n {
        for j in 0..n {
            inv[i * n + j] = if i == j { ONE } else { ZERO };
        }
    }
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].norm();
        for r in col + 1..n {
            let v = a[r * n + col].norm();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return false;
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
                inv.swap(col * n + j, piv * n + j);
            }
        }
        let d = ONE / a[col * n + col];
        for j in 0..n {
            a[col * n + j] *= d;
            inv[col * n + j] *= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == ZERO {
                continue;
            }
            for j in 0..n {
                let (av, iv) = (a[col * n + j], inv[col * n + j]);
                a[r * n + j] -= f * av;
                inv[r * n + j] -= f * iv;
            }
        }
    }
    true
}

/// Determinant by LU with partial pivoting. `a` is destroyed.
pub fn lu_det(a: &mut [C64], n: usize) -> C64 {
    let mut det = ONE;
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].norm();
        for r in col + 1..n {
            let v = a[r * n + col].norm();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return ZERO;
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            det = -det;
        }
        let p = a[col * n + col];
        det *= p;
        for r in col + 1..n {
            let f = a[r * n + col] / p;
            if f == ZERO {
                continue;
            }
            for j in col..n {
                let v = a[col * n + j];
                a[r * n + j] -= f * v;
            }
        }
    }
    det
}

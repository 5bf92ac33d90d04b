//! Stack-allocated square matrices and vectors of order at most [`MAX_ORDER`].
//!
//! The state of every supported Gauss-Markov chain has at most four
//! components, so the filter and smoother work on these fixed-capacity types
//! instead of heap-allocated matrices. Entries outside the active `n×n` block
//! are always zero.

use std::ops::{Add, Index, IndexMut, Mul, Sub};

use nalgebra::{DMatrix, DVector};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmallVec {
    n: usize,
    v: [f64; MAX_ORDER],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmallMat {
    n: usize,
    a: [[f64; MAX_ORDER]; MAX_ORDER],
}

impl SmallVec {
    pub fn zeros(n: usize) -> Self {
        assert!((1..=MAX_ORDER).contains(&n), "order {n} out of range");
        Self {
            n,
            v: [0.0; MAX_ORDER],
        }
    }

    pub fn unit(n: usize, i: usize) -> Self {
        let mut out = Self::zeros(n);
        out.v[i] = 1.0;
        out
    }

    pub fn from_slice(s: &[f64]) -> Self {
        let mut out = Self::zeros(s.len());
        out.v[..s.len()].copy_from_slice(s);
        out
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v[..self.n]
    }

    #[inline]
    pub fn dot(&self, other: &SmallVec) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            s += self.v[i] * other.v[i];
        }
        s
    }

    #[inline]
    pub fn scale(&self, c: f64) -> SmallVec {
        let mut out = *self;
        for i in 0..self.n {
            out.v[i] *= c;
        }
        out
    }

    /// `self · otherᵀ`
    pub fn outer(&self, other: &SmallVec) -> SmallMat {
        let mut out = SmallMat::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.a[i][j] = self.v[i] * other.v[j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|x| x.is_finite())
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.as_slice())
    }
}

impl Index<usize> for SmallVec {
    type Output = f64;
    #[inline]
    fn index(&self, i: usize) -> &f64 {
        debug_assert!(i < self.n);
        &self.v[i]
    }
}

impl IndexMut<usize> for SmallVec {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        debug_assert!(i < self.n);
        &mut self.v[i]
    }
}

impl Add for SmallVec {
    type Output = SmallVec;
    #[inline]
    fn add(mut self, rhs: SmallVec) -> SmallVec {
        for i in 0..self.n {
            self.v[i] += rhs.v[i];
        }
        self
    }
}

impl Sub for SmallVec {
    type Output = SmallVec;
    #[inline]
    fn sub(mut self, rhs: SmallVec) -> SmallVec {
        for i in 0..self.n {
            self.v[i] -= rhs.v[i];
        }
        self
    }
}

impl SmallMat {
    pub fn zeros(n: usize) -> Self {
        assert!((1..=MAX_ORDER).contains(&n), "order {n} out of range");
        Self {
            n,
            a: [[0.0; MAX_ORDER]; MAX_ORDER],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(n);
        for i in 0..n {
            out.a[i][i] = 1.0;
        }
        out
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.a[i][j] = f(i, j);
            }
        }
        out
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut out = Self::zeros(d.len());
        for (i, x) in d.iter().enumerate() {
            out.a[i][i] = *x;
        }
        out
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols());
        Self::from_fn(m.nrows(), |i, j| m[(i, j)])
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.a[i][j])
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn transpose(&self) -> SmallMat {
        let mut out = SmallMat::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.a[i][j] = self.a[j][i];
            }
        }
        out
    }

    #[inline]
    pub fn scale(&self, c: f64) -> SmallMat {
        let mut out = *self;
        for i in 0..self.n {
            for j in 0..self.n {
                out.a[i][j] *= c;
            }
        }
        out
    }

    #[inline]
    pub fn mul_vec(&self, x: &SmallVec) -> SmallVec {
        let mut out = SmallVec::zeros(self.n);
        for i in 0..self.n {
            let mut s = 0.0;
            for j in 0..self.n {
                s += self.a[i][j] * x.v[j];
            }
            out.v[i] = s;
        }
        out
    }

    /// `selfᵀ x`
    #[inline]
    pub fn tr_mul_vec(&self, x: &SmallVec) -> SmallVec {
        let mut out = SmallVec::zeros(self.n);
        for j in 0..self.n {
            let mut s = 0.0;
            for i in 0..self.n {
                s += self.a[i][j] * x.v[i];
            }
            out.v[j] = s;
        }
        out
    }

    /// `self · rhsᵀ`
    #[inline]
    pub fn mul_tr(&self, rhs: &SmallMat) -> SmallMat {
        let n = self.n;
        let mut out = SmallMat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += self.a[i][k] * rhs.a[j][k];
                }
                out.a[i][j] = s;
            }
        }
        out
    }

    /// `self · p · selfᵀ`, symmetrized.
    #[inline]
    pub fn congruence(&self, p: &SmallMat) -> SmallMat {
        (*self * *p).mul_tr(self).symmetrize()
    }

    #[inline]
    pub fn symmetrize(&self) -> SmallMat {
        let mut out = *self;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let m = 0.5 * (self.a[i][j] + self.a[j][i]);
                out.a[i][j] = m;
                out.a[j][i] = m;
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.a[i][i]).sum()
    }

    /// Elementwise sum of `self ∘ other`, i.e. `tr(selfᵀ other)`.
    pub fn frobenius_dot(&self, other: &SmallMat) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                s += self.a[i][j] * other.a[i][j];
            }
        }
        s
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                m = m.max(self.a[i][j].abs());
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.a[i][j].is_finite()))
    }

    pub fn column(&self, j: usize) -> SmallVec {
        let mut out = SmallVec::zeros(self.n);
        for i in 0..self.n {
            out.v[i] = self.a[i][j];
        }
        out
    }

    /// Solves `self · X = rhs` by Gaussian elimination with partial pivoting.
    /// Returns `None` when a pivot vanishes relative to the matrix scale.
    pub fn solve(&self, rhs: &SmallMat) -> Option<SmallMat> {
        let n = self.n;
        let mut a = self.a;
        let mut b = rhs.a;
        let scale = self.max_abs();
        if scale == 0.0 || !scale.is_finite() {
            return None;
        }
        for col in 0..n {
            let mut piv = col;
            for r in (col + 1)..n {
                if a[r][col].abs() > a[piv][col].abs() {
                    piv = r;
                }
            }
            if a[piv][col].abs() <= scale * 1e-16 {
                return None;
            }
            a.swap(col, piv);
            b.swap(col, piv);
            let inv = 1.0 / a[col][col];
            for r in (col + 1)..n {
                let f = a[r][col] * inv;
                if f == 0.0 {
                    continue;
                }
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                for c in 0..n {
                    b[r][c] -= f * b[col][c];
                }
            }
        }
        let mut x = [[0.0; MAX_ORDER]; MAX_ORDER];
        for c in 0..n {
            for r in (0..n).rev() {
                let mut s = b[r][c];
                for k in (r + 1)..n {
                    s -= a[r][k] * x[k][c];
                }
                x[r][c] = s / a[r][r];
            }
        }
        Some(SmallMat { n, a: x })
    }

    pub fn inverse(&self) -> Option<SmallMat> {
        self.solve(&SmallMat::identity(self.n))
    }

    /// Lower-triangular factor `L` with `L Lᵀ ≈ self` for a symmetric
    /// positive semi-definite matrix. Pivots that fall below a relative
    /// tolerance are treated as exact zeros, so singular covariances (for
    /// example a state pinned by a noise-free observation) still factor.
    pub fn psd_cholesky(&self) -> SmallMat {
        let n = self.n;
        let mut l = SmallMat::zeros(n);
        let scale = (0..n).map(|i| self.a[i][i].abs()).fold(0.0, f64::max);
        let tol = scale * 1e-13;
        for j in 0..n {
            let mut d = self.a[j][j];
            for k in 0..j {
                d -= l.a[j][k] * l.a[j][k];
            }
            if d <= tol {
                continue;
            }
            let ljj = d.sqrt();
            l.a[j][j] = ljj;
            for i in (j + 1)..n {
                let mut s = self.a[i][j];
                for k in 0..j {
                    s -= l.a[i][k] * l.a[j][k];
                }
                l.a[i][j] = s / ljj;
            }
        }
        l
    }

    /// Cholesky factor of a symmetric positive definite matrix, or `None`
    /// if a pivot is not positive.
    pub fn cholesky(&self) -> Option<SmallMat> {
        let n = self.n;
        let mut l = SmallMat::zeros(n);
        for j in 0..n {
            let mut d = self.a[j][j];
            for k in 0..j {
                d -= l.a[j][k] * l.a[j][k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let ljj = d.sqrt();
            l.a[j][j] = ljj;
            for i in (j + 1)..n {
                let mut s = self.a[i][j];
                for k in 0..j {
                    s -= l.a[i][k] * l.a[j][k];
                }
                l.a[i][j] = s / ljj;
            }
        }
        Some(l)
    }

    /// `(log det self, tr(self⁻¹ e))` for symmetric positive definite `self`,
    /// computed after scaling to unit diagonal.
    pub fn logdet_and_trace_solve(&self, e: &SmallMat) -> Option<(f64, f64)> {
        let n = self.n;
        let mut inv_s = [0.0; MAX_ORDER];
        let mut log_scale = 0.0;
        for i in 0..n {
            let d = self.a[i][i];
            if !(d > 0.0) {
                return None;
            }
            inv_s[i] = 1.0 / d.sqrt();
            log_scale += d.ln();
        }
        let q = SmallMat::from_fn(n, |i, j| self.a[i][j] * inv_s[i] * inv_s[j]);
        let et = SmallMat::from_fn(n, |i, j| e.a[i][j] * inv_s[i] * inv_s[j]);
        let l = q.cholesky()?;
        let mut logdet = log_scale;
        for i in 0..n {
            logdet += 2.0 * l.a[i][i].ln();
        }
        // tr(q⁻¹ et) = Σ_j (L⁻¹ et L⁻ᵀ)_jj via forward substitution per column
        let mut tr = 0.0;
        let mut w = [[0.0; MAX_ORDER]; MAX_ORDER];
        for c in 0..n {
            for i in 0..n {
                let mut s = et.a[i][c];
                for k in 0..i {
                    s -= l.a[i][k] * w[k][c];
                }
                w[i][c] = s / l.a[i][i];
            }
        }
        // w = L⁻¹ et; now tr(L⁻¹ et L⁻ᵀ) = tr(w L⁻ᵀ) = Σ_i (w L⁻ᵀ)_ii
        for i in 0..n {
            let mut v = [0.0; MAX_ORDER];
            for k in 0..n {
                let mut s = w[i][k];
                for j in 0..k {
                    s -= l.a[k][j] * v[j];
                }
                v[k] = s / l.a[k][k];
            }
            tr += v[i];
        }
        Some((logdet, tr))
    }

    /// Smallest eigenvalue of the symmetric part, via the dense eigensolver.
    pub fn min_eigenvalue(&self) -> f64 {
        let m = self.symmetrize().to_dmatrix();
        m.symmetric_eigenvalues().min()
    }
}

impl Index<(usize, usize)> for SmallMat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.n && j < self.n);
        &self.a[i][j]
    }
}

impl IndexMut<(usize, usize)> for SmallMat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.n && j < self.n);
        &mut self.a[i][j]
    }
}

impl Add for SmallMat {
    type Output = SmallMat;
    #[inline]
    fn add(mut self, rhs: SmallMat) -> SmallMat {
        for i in 0..self.n {
            for j in 0..self.n {
                self.a[i][j] += rhs.a[i][j];
            }
        }
        self
    }
}

impl Sub for SmallMat {
    type Output = SmallMat;
    #[inline]
    fn sub(mut self, rhs: SmallMat) -> SmallMat {
        for i in 0..self.n {
            for j in 0..self.n {
                self.a[i][j] -= rhs.a[i][j];
            }
        }
        self
    }
}

impl Mul for SmallMat {
    type Output = SmallMat;
    #[inline]
    fn mul(self, rhs: SmallMat) -> SmallMat {
        let n = self.n;
        let mut out = SmallMat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self.a[i][k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.a[i][j] += aik * rhs.a[k][j];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spd() -> SmallMat {
        let b = SmallMat::from_fn(3, |i, j| ((i * 3 + j) as f64 * 0.7).sin());
        b.mul_tr(&b) + SmallMat::identity(3).scale(0.5)
    }

    #[test]
    fn solve_matches_dense_inverse() {
        let a = spd();
        let inv = a.inverse().unwrap();
        let prod = a * inv;
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(
                    prod[(i, j)],
                    if i == j { 1.0 } else { 0.0 },
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn singular_solve_is_none() {
        let a = SmallVec::from_slice(&[1.0, 2.0]).outer(&SmallVec::from_slice(&[1.0, 2.0]));
        assert!(a.inverse().is_none());
    }

    #[test]
    fn psd_cholesky_reconstructs_singular_matrix() {
        let v = SmallVec::from_slice(&[1.0, -2.0, 0.5]);
        let a = v.outer(&v);
        let l = a.psd_cholesky();
        let back = l.mul_tr(&l);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(back[(i, j)], a[(i, j)], epsilon = 1e-12);
            }
        }
        let a = spd();
        let l = a.psd_cholesky();
        let back = l.mul_tr(&l);
        assert_abs_diff_eq!((back - a).max_abs(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn products_agree_with_nalgebra() {
        let a = SmallMat::from_fn(4, |i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.2);
        let b = spd();
        let b4 = SmallMat::from_fn(4, |i, j| {
            if i < 3 && j < 3 {
                b[(i, j)]
            } else {
                (i + j) as f64
            }
        });
        let ours = (a * b4).to_dmatrix();
        let theirs = a.to_dmatrix() * b4.to_dmatrix();
        assert_abs_diff_eq!((ours - theirs).abs().max(), 0.0, epsilon = 1e-14);
        let ours = a.mul_tr(&b4).to_dmatrix();
        let theirs = a.to_dmatrix() * b4.to_dmatrix().transpose();
        assert_abs_diff_eq!((ours - theirs).abs().max(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn logdet_and_trace_solve_matches_dense() {
        let p = SmallMat::from_fn(3, |i, j| {
            if i == j {
                2.0 + i as f64
            } else {
                0.3 / (1.0 + (i + j) as f64)
            }
        });
        let e = SmallMat::from_fn(3, |i, j| 1.0 + (i * 3 + j) as f64 * 0.1);
        let (ld, tr) = p.logdet_and_trace_solve(&e).unwrap();
        let pd = p.to_dmatrix();
        assert!((ld - pd.determinant().ln()).abs() < 1e-12);
        let expected = (pd.try_inverse().unwrap() * e.to_dmatrix()).trace();
        assert!((tr - expected).abs() < 1e-12);
        assert!(SmallMat::diagonal(&[1.0, -1.0]).cholesky().is_none());
    }
}

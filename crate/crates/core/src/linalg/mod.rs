//! Dense helpers shared by the engines: Lyapunov solves, the matrix
//! exponential, and Cholesky factorization with a jitter ladder.

pub mod small;

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{GpError, Result};

pub use small::{SmallMat, SmallVec, MAX_ORDER};

/// Solves the continuous Lyapunov equation `A P + P Aᵀ + C = 0` for `P` by
/// vectorization. Only intended for the small state matrices used here.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = a.nrows();
    let id = DMatrix::<f64>::identity(m, m);
    // vec(A P) = (I ⊗ A) vec(P), vec(P Aᵀ) = (A ⊗ I) vec(P) for column-major vec.
    let sys = id.kronecker(a) + a.kronecker(&id);
    let rhs = -DMatrix::from_column_slice(m * m, 1, c.as_slice());
    let sol = sys
        .lu()
        .solve(&rhs)
        .ok_or_else(|| GpError::IllConditioned {
            step: 0,
            detail: "singular Lyapunov operator".into(),
        })?;
    let p = DMatrix::from_column_slice(m, m, sol.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Matrix exponential by scaling and squaring with a degree-13 Padé
/// approximant.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let norm1 = (0..n)
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    const THETA13: f64 = 5.371920351148152;
    let s = if norm1 > THETA13 {
        (norm1 / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a / 2f64.powi(s);
    let b = &PADE13;
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &id * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &id * b[0];
    let mut r = (&v - &u)
        .lu()
        .solve(&(&v + &u))
        .expect("Padé denominator is nonsingular after scaling");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// Cholesky factorization of a symmetric matrix, escalating diagonal jitter
/// through `ladder` (relative to the mean diagonal) until it succeeds.
/// Returns the factor and the absolute jitter that was added.
pub fn cholesky_jittered(m: &DMatrix<f64>, ladder: &[f64]) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = m.clone().cholesky() {
        return Ok((c, 0.0));
    }
    let n = m.nrows().max(1);
    let scale = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    for rel in ladder {
        let jitter = rel * scale;
        let mut mm = m.clone();
        for i in 0..m.nrows() {
            mm[(i, i)] += jitter;
        }
        if let Some(c) = mm.cholesky() {
            return Ok((c, jitter));
        }
    }
    Err(GpError::IllConditioned {
        step: 0,
        detail: "matrix not positive definite after jitter ladder".into(),
    })
}

/// Log-determinant from a Cholesky factor.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

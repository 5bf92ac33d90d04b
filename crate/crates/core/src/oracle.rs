//! Dense reference implementations: exact GP regression by Cholesky
//! factorization and dense Laplace classification. Cubic cost; the other
//! modules are tested against these.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{invalid, GpError, Result};
use crate::kernels::Kernel;
use crate::linalg::{chol_logdet, cholesky_jittered};

/// Largest training set the oracle accepts unless told otherwise.
pub const DEFAULT_CAP: usize = 3000;

const JITTER_LADDER: [f64; 7] = [1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];
const LN_2PI: f64 = 1.8378770664093453;

/// Covariance on `R^D` built from scalar Matérn kernels.
#[derive(Clone, Copy, Debug)]
pub enum DenseKernel<'a> {
    /// One kernel of the Euclidean distance.
    Isotropic(&'a Kernel),
    /// `Σ_d k_d(x_d, x'_d)`.
    Additive(&'a [Kernel]),
    /// `Π_d k_d(x_d, x'_d)`.
    Product(&'a [Kernel]),
}

impl DenseKernel<'_> {
    fn check(&self, d: usize) -> Result<()> {
        match self {
            Self::Isotropic(_) => Ok(()),
            Self::Additive(ks) | Self::Product(ks) if ks.len() == d => Ok(()),
            Self::Additive(ks) | Self::Product(ks) => Err(GpError::Shape {
                dim: d,
                detail: format!("{} kernels for {d} input columns", ks.len()),
            }),
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Self::Isotropic(k) => k.eval(
                a.iter()
                    .zip(b)
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum::<f64>()
                    .sqrt(),
            ),
            Self::Additive(ks) => ks
                .iter()
                .enumerate()
                .map(|(d, k)| k.eval(a[d] - b[d]))
                .sum(),
            Self::Product(ks) => ks
                .iter()
                .enumerate()
                .map(|(d, k)| k.eval(a[d] - b[d]))
                .product(),
        }
    }

    /// Dense cross-covariance between the rows of `a` and `b`.
    pub fn matrix(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let ra: Vec<Vec<f64>> = a.row_iter().map(|r| r.iter().copied().collect()).collect();
        let rb: Vec<Vec<f64>> = b.row_iter().map(|r| r.iter().copied().collect()).collect();
        DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| self.eval(&ra[i], &rb[j]))
    }
}

/// Exact predictive moments and log marginal likelihood.
#[derive(Clone, Debug)]
pub struct DenseGpResult {
    /// Predictive means of `f` at the test rows.
    pub mean: DVector<f64>,
    /// Predictive covariance of `f` at the test rows.
    pub cov: DMatrix<f64>,
    pub log_z: f64,
    /// `(K + Σ)⁻¹ y`
    pub alpha: DVector<f64>,
    pub chol: Cholesky<f64, Dyn>,
    /// Jitter that had to be added to the diagonal.
    pub jitter: f64,
}

/// Dense GP regression with homoscedastic noise.
pub fn full_gp(
    x: &DMatrix<f64>,
    y: &[f64],
    x_test: &DMatrix<f64>,
    kernel: DenseKernel<'_>,
    noise: f64,
) -> Result<DenseGpResult> {
    full_gp_hetero(x, y, x_test, kernel, &vec![noise; y.len()], DEFAULT_CAP)
}

/// Dense GP regression with one noise variance per observation and an
/// explicit size cap.
pub fn full_gp_hetero(
    x: &DMatrix<f64>,
    y: &[f64],
    x_test: &DMatrix<f64>,
    kernel: DenseKernel<'_>,
    noise: &[f64],
    cap: usize,
) -> Result<DenseGpResult> {
    let n = x.nrows();
    if n > cap {
        return Err(invalid(format!("dense GP capped at {cap} points, got {n}")));
    }
    if y.len() != n || noise.len() != n {
        return Err(invalid(format!(
            "{n} rows but {} targets and {} noise values",
            y.len(),
            noise.len()
        )));
    }
    if x_test.ncols() != x.ncols() {
        return Err(GpError::Shape {
            dim: x.ncols(),
            detail: "test inputs have a different width".into(),
        });
    }
    if noise.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
        return Err(invalid("noise variances must be finite and non-negative"));
    }
    kernel.check(x.ncols())?;
    let mut k = kernel.matrix(x, x);
    for i in 0..n {
        k[(i, i)] += noise[i];
    }
    let (chol, jitter) = cholesky_jittered(&k, &JITTER_LADDER)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let log_z = -0.5 * yv.dot(&alpha) - 0.5 * chol_logdet(&chol) - 0.5 * n as f64 * LN_2PI;
    let ks = kernel.matrix(x, x_test);
    let kss = kernel.matrix(x_test, x_test);
    let mean = ks.transpose() * &alpha;
    let v = chol.solve(&ks);
    let cov = kss - ks.transpose() * v;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(DenseGpResult {
        mean,
        cov,
        log_z,
        alpha,
        chol,
        jitter,
    })
}

/// Per-dimension posterior means `K_d (K_add + Σ)⁻¹ y` of an additive model,
/// evaluated at the training inputs.
pub fn additive_component_means(
    x: &DMatrix<f64>,
    y: &[f64],
    kernels: &[Kernel],
    noise: &[f64],
) -> Result<Vec<DVector<f64>>> {
    Ok(additive_component_posterior(x, y, kernels, noise)?
        .into_iter()
        .map(|(m, _)| m)
        .collect())
}

/// Exact posterior mean and marginal variance of every additive component
/// at the training inputs: `K_d α` and `diag(K_d − K_d (K_add + Σ)⁻¹ K_d)`.
pub fn additive_component_posterior(
    x: &DMatrix<f64>,
    y: &[f64],
    kernels: &[Kernel],
    noise: &[f64],
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    let fit = full_gp_hetero(
        x,
        y,
        &DMatrix::zeros(0, x.ncols()),
        DenseKernel::Additive(kernels),
        noise,
        DEFAULT_CAP,
    )?;
    Ok(kernels
        .iter()
        .enumerate()
        .map(|(d, k)| {
            let col: Vec<f64> = x.column(d).iter().copied().collect();
            let kd = k.matrix(&col, &col);
            let mean = &kd * &fit.alpha;
            let solved = fit.chol.solve(&kd);
            let var = DVector::from_fn(col.len(), |i, _| {
                kd[(i, i)] - kd.row(i).dot(&solved.column(i).transpose())
            });
            (mean, var)
        })
        .collect())
}

/// Numerically stable `log(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Σ_i log p(y_i | f_i)` under the logistic link, `y ∈ {0,1}`.
pub(crate) fn logistic_loglik(y: &[f64], f: &[f64]) -> f64 {
    y.iter()
        .zip(f)
        .map(|(&yi, &fi)| {
            if yi > 0.5 {
                -softplus(-fi)
            } else {
                -softplus(fi)
            }
        })
        .sum()
}

/// Dense Laplace approximation for logistic classification.
#[derive(Clone, Debug)]
pub struct DenseLaplaceFit {
    /// MAP latent values.
    pub f: DVector<f64>,
    /// `K⁻¹ f̂`, which at the mode equals the log-likelihood gradient.
    pub a: DVector<f64>,
    /// Negative log-likelihood curvature at the mode.
    pub w: DVector<f64>,
    /// `Ω` after every accepted Newton step.
    pub objective_trace: Vec<f64>,
    /// Standard Laplace approximation of `log p(y | X, θ)`.
    pub log_evidence: f64,
    k: DMatrix<f64>,
    x: DMatrix<f64>,
}

/// Curvature floor shared with the state-space classifier.
pub const CURVATURE_FLOOR: f64 = 1e-6;

/// Damped Newton iteration on `Ω(f) = log p(y|f) − ½ fᵀK⁻¹f` with the
/// additive kernel, using the `B = I + W^½ K W^½` formulation.
pub fn full_gp_laplace(
    x: &DMatrix<f64>,
    y: &[f64],
    kernels: &[Kernel],
    tol: f64,
    max_iter: usize,
) -> Result<DenseLaplaceFit> {
    let n = x.nrows();
    if n > DEFAULT_CAP {
        return Err(invalid(format!(
            "dense Laplace capped at {DEFAULT_CAP} points, got {n}"
        )));
    }
    if y.len() != n {
        return Err(invalid("targets and inputs differ in length"));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("class labels must be 0 or 1"));
    }
    let kernel = DenseKernel::Additive(kernels);
    kernel.check(x.ncols())?;
    let k = kernel.matrix(x, x);
    let mut a = DVector::zeros(n);
    let mut f = DVector::zeros(n);
    let omega =
        |a: &DVector<f64>, f: &DVector<f64>| logistic_loglik(y, f.as_slice()) - 0.5 * a.dot(f);
    let mut trace = vec![omega(&a, &f)];
    let mut converged = false;
    for _ in 0..max_iter {
        let (grad, w) = logistic_derivatives(y, f.as_slice());
        let sw = w.map(f64::sqrt);
        let b = DMatrix::from_fn(
            n,
            n,
            |i, j| if i == j { 1.0 } else { 0.0 } + sw[i] * k[(i, j)] * sw[j],
        );
        let (chol, _) = cholesky_jittered(&b, &JITTER_LADDER)?;
        let bvec = w.component_mul(&f) + &grad;
        let kb = &k * &bvec;
        let rhs = sw.component_mul(&kb);
        let a_new = &bvec - sw.component_mul(&chol.solve(&rhs));
        let step = &a_new - &a;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=20 {
            let a_try = &a + &step * scale;
            let f_try = &k * &a_try;
            let o = omega(&a_try, &f_try);
            if o >= *trace.last().unwrap() - 1e-12 * trace.last().unwrap().abs().max(1.0) {
                accepted = Some((a_try, f_try, o));
                break;
            }
            scale *= 0.5;
        }
        let Some((a_new, f_new, o)) = accepted else {
            break;
        };
        let change = (&f_new - &f).amax();
        a = a_new;
        f = f_new;
        trace.push(o);
        if change < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GpError::NewtonNotConverged {
            iterations: max_iter,
            objective_trace: trace,
        });
    }
    let (_, w) = logistic_derivatives(y, f.as_slice());
    let sw = w.map(f64::sqrt);
    let b = DMatrix::from_fn(
        n,
        n,
        |i, j| if i == j { 1.0 } else { 0.0 } + sw[i] * k[(i, j)] * sw[j],
    );
    let (chol, _) = cholesky_jittered(&b, &JITTER_LADDER)?;
    let log_evidence =
        logistic_loglik(y, f.as_slice()) - 0.5 * a.dot(&f) - 0.5 * chol_logdet(&chol);
    Ok(DenseLaplaceFit {
        f,
        a,
        w,
        objective_trace: trace,
        log_evidence,
        k,
        x: x.clone(),
    })
}

impl DenseLaplaceFit {
    /// Latent predictive mean and variance at the test rows.
    pub fn predict_latent(
        &self,
        x_test: &DMatrix<f64>,
        kernels: &[Kernel],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let kernel = DenseKernel::Additive(kernels);
        let ks = kernel.matrix(&self.x, x_test);
        let n = self.f.len();
        let sw = self.w.map(f64::sqrt);
        let b = DMatrix::from_fn(
            n,
            n,
            |i, j| if i == j { 1.0 } else { 0.0 } + sw[i] * self.k[(i, j)] * sw[j],
        );
        let (chol, _) = cholesky_jittered(&b, &JITTER_LADDER)?;
        let mean = ks.transpose() * &self.a;
        let mut var = Vec::with_capacity(x_test.nrows());
        for j in 0..x_test.nrows() {
            let kj = ks.column(j).into_owned();
            let v = chol
                .l()
                .solve_lower_triangular(&sw.component_mul(&kj))
                .expect("triangular factor");
            let row: Vec<f64> = x_test.row(j).iter().copied().collect();
            var.push((kernel.eval(&row, &row) - v.norm_squared()).max(0.0));
        }
        Ok((mean.iter().copied().collect(), var))
    }
}

/// Gradient and floored negative curvature of the logistic log-likelihood.
pub(crate) fn logistic_derivatives(y: &[f64], f: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let grad = DVector::from_iterator(f.len(), y.iter().zip(f).map(|(&yi, &fi)| yi - sigmoid(fi)));
    let w = DVector::from_iterator(
        f.len(),
        f.iter().map(|&fi| {
            let p = sigmoid(fi);
            (p * (1.0 - p)).max(CURVATURE_FLOOR)
        }),
    );
    (grad, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_point_variance() {
        let k = Kernel::matern72(1.0, 2.0).unwrap();
        let x = DMatrix::from_element(1, 1, 0.5);
        let r = full_gp(&x, &[0.7], &x, DenseKernel::Isotropic(&k), 0.5).unwrap();
        assert_abs_diff_eq!(r.cov[(0, 0)], 2.0 - 4.0 / 2.5, epsilon = 1e-12);
    }

    #[test]
    fn interpolation_limit() {
        let k = Kernel::matern72(1.0, 1.0).unwrap();
        let x = DMatrix::from_column_slice(4, 1, &[0.0, 0.5, 1.3, 2.0]);
        let y = [0.1, -0.4, 0.9, 0.2];
        let r = full_gp(&x, &y, &x, DenseKernel::Isotropic(&k), 1e-10).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(r.mean[i], y[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_targets_log_z() {
        let ks = [
            Kernel::matern72(1.0, 1.0).unwrap(),
            Kernel::matern72(0.5, 0.3).unwrap(),
        ];
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.1, 0.4, 0.9, 1.0, 0.2]);
        let r = full_gp(&x, &[0.0; 3], &x, DenseKernel::Additive(&ks), 0.1).unwrap();
        let mut m = DenseKernel::Additive(&ks).matrix(&x, &x);
        for i in 0..3 {
            m[(i, i)] += 0.1;
        }
        let expected = -0.5 * m.determinant().ln() - 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert_abs_diff_eq!(r.log_z, expected, epsilon = 1e-12);
    }

    #[test]
    fn solve_residual() {
        let k = Kernel::matern72(0.7, 1.0).unwrap();
        let x = DMatrix::from_fn(30, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0);
        let y: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let r = full_gp(&x, &y, &x, DenseKernel::Isotropic(&k), 0.05).unwrap();
        let mut m = DenseKernel::Isotropic(&k).matrix(&x, &x);
        for i in 0..30 {
            m[(i, i)] += 0.05 + r.jitter;
        }
        let res = &m * &r.alpha - DVector::from_column_slice(&y);
        assert!(res.norm() / DVector::from_column_slice(&y).norm() <= 1e-9);
    }

    #[test]
    fn laplace_single_positive_observation() {
        let ks = [Kernel::matern72(1.0, 100.0).unwrap()];
        let x = DMatrix::from_element(1, 1, 0.0);
        let fit = full_gp_laplace(&x, &[1.0], &ks, 1e-9, 100).unwrap();
        assert!(fit.f[0] > 2.0);
        assert!(sigmoid(fit.f[0]) > 0.9);
        assert!(fit.objective_trace.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn stable_logistic_helpers() {
        assert_abs_diff_eq!(softplus(0.0), 2f64.ln(), epsilon = 1e-15);
        assert!(softplus(800.0).is_finite());
        assert_abs_diff_eq!(sigmoid(-800.0), 0.0);
        assert_abs_diff_eq!(
            logistic_loglik(&[1.0, 0.0], &[0.0, 0.0]),
            -2.0 * 2f64.ln(),
            epsilon = 1e-15
        );
    }
}

//! Exact GP regression on Cartesian grids with product kernels.
//!
//! With inputs on a grid `g_1 × … × g_D` and `k(x, x') = Π_d k_d(x_d, x'_d)`
//! the covariance is `K = K_1 ⊗ … ⊗ K_D`. Its eigenvectors are the Kronecker
//! product of the per-axis eigenvectors and its eigenvalues the Kronecker
//! product of the per-axis eigenvalues, so
//! `(K + σ²I)⁻¹ y = Q (Λ + σ²I)⁻¹ Qᵀ y` costs two Kronecker matrix-vector
//! products and one diagonal scaling.
//!
//! Vectors over the grid are laid out with the last axis varying fastest.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{invalid, GpError, Result};
use crate::kernels::{Kernel, MaternOrder};
use crate::optim::nelder_mead;

/// The axes of a Cartesian grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    axes: Vec<Vec<f64>>,
}

impl GridSpec {
    /// Every axis needs at least two strictly increasing finite values.
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(invalid("a grid needs at least one axis"));
        }
        for (d, a) in axes.iter().enumerate() {
            if a.len() < 2 {
                return Err(GpError::Shape {
                    dim: d,
                    detail: format!("axis has {} points, need at least 2", a.len()),
                });
            }
            if a.iter().any(|v| !v.is_finite()) || a.windows(2).any(|w| w[1] <= w[0]) {
                return Err(GpError::Shape {
                    dim: d,
                    detail: "axis values must be finite and strictly increasing".into(),
                });
            }
        }
        Ok(Self { axes })
    }

    /// `n` equispaced points on `[lo, hi]` along each axis.
    pub fn uniform(dims: &[(f64, f64, usize)]) -> Result<Self> {
        Self::new(
            dims.iter()
                .map(|&(lo, hi, n)| {
                    (0..n)
                        .map(|i| lo + (hi - lo) * i as f64 / (n.max(2) - 1) as f64)
                        .collect()
                })
                .collect(),
        )
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn n_dims(&self) -> usize {
        self.axes.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-axis indices of the flat index `i`.
    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        let mut idx = vec![0; self.axes.len()];
        for d in (0..self.axes.len()).rev() {
            let g = self.axes[d].len();
            idx[d] = i % g;
            i /= g;
        }
        idx
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.multi_index(i)
            .iter()
            .zip(&self.axes)
            .map(|(&k, a)| a[k])
            .collect()
    }

    /// All grid points as rows, in storage order.
    pub fn points(&self) -> DMatrix<f64> {
        let d = self.n_dims();
        let mut out = DMatrix::zeros(self.len(), d);
        for i in 0..self.len() {
            for (j, v) in self.point(i).into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }
}

/// `(A_1 ⊗ … ⊗ A_D) b` without forming the Kronecker product.
///
/// `A_d` may be rectangular (`H_d × G_d`); `b` has length `Π G_d` and the
/// result length `Π H_d`.
pub fn kron_mvprod(mats: &[DMatrix<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let cols: usize = mats.iter().map(|a| a.ncols()).product();
    if mats.is_empty() {
        return Err(invalid("need at least one factor"));
    }
    if b.len() != cols {
        return Err(GpError::Shape {
            dim: 0,
            detail: format!("vector has length {}, factors need {cols}", b.len()),
        });
    }
    // current[d] is the extent of axis d in `x`: H_d for processed axes, G_d otherwise
    let mut extents: Vec<usize> = mats.iter().map(|a| a.ncols()).collect();
    let mut x = b.to_vec();
    for d in (0..mats.len()).rev() {
        let a = &mats[d];
        let g = extents[d];
        let h = a.nrows();
        let post: usize = extents[d + 1..].iter().product();
        let pre: usize = extents[..d].iter().product();
        let mut out = vec![0.0; pre * h * post];
        for p in 0..pre {
            // slab[q, k] = x[p, k, q]; column-major (post × g)
            let slab = DMatrix::from_column_slice(post, g, &x[p * g * post..(p + 1) * g * post]);
            let res = slab * a.transpose();
            out[p * h * post..(p + 1) * h * post].copy_from_slice(res.as_slice());
        }
        extents[d] = h;
        x = out;
    }
    Ok(x)
}

/// `v_1 ⊗ … ⊗ v_D` for vectors, last factor fastest.
pub fn kron_vec(factors: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![1.0];
    for f in factors {
        let mut next = Vec::with_capacity(out.len() * f.len());
        for &a in &out {
            next.extend(f.iter().map(|&v| a * v));
        }
        out = next;
    }
    out
}

const EIGEN_JITTER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Phase timings of a grid solve in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GridTimings {
    pub eigen: f64,
    pub solve: f64,
}

/// A solved grid GP.
#[derive(Clone, Debug)]
pub struct GridGpModel {
    spec: GridSpec,
    kernels: Vec<Kernel>,
    noise: f64,
    offset: f64,
    eigvecs: Vec<DMatrix<f64>>,
    eigvals: Vec<Vec<f64>>,
    /// `λ_i + σ²` for every grid index.
    denom: Vec<f64>,
    alpha: Vec<f64>,
    log_z: f64,
    jitter: f64,
    pub timings: GridTimings,
}

fn axis_eigen(k: &DMatrix<f64>, d: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let eig =
        SymmetricEigen::try_new(k.clone(), 1e-15, 0).ok_or_else(|| GpError::IllConditioned {
            step: d,
            detail: "symmetric eigendecomposition failed".into(),
        })?;
    Ok((eig.eigenvectors, eig.eigenvalues.iter().copied().collect()))
}

/// Solves `(K + σ²I) α = y` on a grid and returns the fitted model.
///
/// `kernels[d]` acts on axis `d`; the product kernel amplitude is the product
/// of the per-axis amplitudes.
pub fn grid_solve(
    spec: &GridSpec,
    kernels: &[Kernel],
    noise: f64,
    y: &[f64],
) -> Result<GridGpModel> {
    if kernels.len() != spec.n_dims() {
        return Err(GpError::Shape {
            dim: kernels.len(),
            detail: format!("grid has {} axes", spec.n_dims()),
        });
    }
    if !(noise > 0.0 && noise.is_finite()) {
        return Err(invalid("noise variance must be positive"));
    }
    if y.len() != spec.len() {
        return Err(invalid(format!(
            "grid has {} points but y has {}",
            spec.len(),
            y.len()
        )));
    }
    let t0 = Instant::now();
    let mats: Vec<DMatrix<f64>> = spec
        .axes()
        .iter()
        .zip(kernels)
        .map(|(a, k)| k.matrix(a, a))
        .collect();
    let mut last_err = None;
    for &jitter in &EIGEN_JITTER {
        let eig: Result<Vec<(DMatrix<f64>, Vec<f64>)>> = mats
            .par_iter()
            .enumerate()
            .map(|(d, m)| {
                let mut m = m.clone();
                let scale = kernels[d].amplitude();
                for i in 0..m.nrows() {
                    m[(i, i)] += jitter * scale;
                }
                axis_eigen(&m, d)
            })
            .collect();
        let eig = match eig {
            Ok(e) => e,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let (eigvecs, eigvals): (Vec<_>, Vec<_>) = eig.into_iter().unzip();
        let denom: Vec<f64> = kron_vec(&eigvals).into_iter().map(|l| l + noise).collect();
        if let Some(i) = denom.iter().position(|v| !(*v > 0.0)) {
            last_err = Some(GpError::IllConditioned {
                step: i,
                detail: format!(
                    "eigenvalue plus noise is {:e} after jitter {jitter:e}",
                    denom[i]
                ),
            });
            continue;
        }
        let eigen = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let qt: Vec<DMatrix<f64>> = eigvecs.iter().map(|q| q.transpose()).collect();
        let mut z = kron_mvprod(&qt, y)?;
        for (zi, di) in z.iter_mut().zip(&denom) {
            *zi /= di;
        }
        let alpha = kron_mvprod(&eigvecs, &z)?;
        let n = y.len() as f64;
        let log_z = -0.5 * y.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>()
            - 0.5 * denom.iter().map(|v| v.ln()).sum::<f64>()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
        let solve = t1.elapsed().as_secs_f64();
        return Ok(GridGpModel {
            spec: spec.clone(),
            kernels: kernels.to_vec(),
            noise,
            offset: 0.0,
            eigvecs,
            eigvals,
            denom,
            alpha,
            log_z,
            jitter,
            timings: GridTimings { eigen, solve },
        });
    }
    Err(last_err.unwrap_or_else(|| GpError::IllConditioned {
        step: 0,
        detail: "grid solve failed".into(),
    }))
}

impl GridGpModel {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    /// Constant added to predictions; non-zero only after [`grid_fit`].
    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    /// Relative diagonal jitter that was needed, usually 0.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn eigenvectors(&self) -> &[DMatrix<f64>] {
        &self.eigvecs
    }

    pub fn eigenvalues(&self) -> &[Vec<f64>] {
        &self.eigvals
    }

    fn jittered_axis_matrices(&self) -> Vec<DMatrix<f64>> {
        self.spec
            .axes()
            .iter()
            .zip(&self.kernels)
            .map(|(a, k)| {
                let mut m = k.matrix(a, a);
                for i in 0..m.nrows() {
                    m[(i, i)] += self.jitter * k.amplitude();
                }
                m
            })
            .collect()
    }

    /// `‖(K + σ²I) α − y‖ / ‖y‖` using Kronecker products only.
    pub fn solve_residual(&self, y: &[f64]) -> Result<f64> {
        let centred: Vec<f64> = y.iter().map(|v| v - self.offset).collect();
        let ka = kron_mvprod(&self.jittered_axis_matrices(), &self.alpha)?;
        let num: f64 = ka
            .iter()
            .zip(&self.alpha)
            .zip(&centred)
            .map(|((k, a), y)| (k + self.noise * a - y).powi(2))
            .sum();
        let den: f64 = centred.iter().map(|v| v * v).sum();
        Ok((num / den.max(f64::MIN_POSITIVE)).sqrt())
    }

    fn cross_rows(&self, point: &[f64]) -> Vec<Vec<f64>> {
        self.spec
            .axes()
            .iter()
            .zip(&self.kernels)
            .zip(point)
            .map(|((a, k), &p)| a.iter().map(|&g| k.eval(p - g)).collect())
            .collect()
    }

    fn predict_point(&self, point: &[f64], with_variance: bool) -> Result<(f64, f64)> {
        let rows = self.cross_rows(point);
        let mats: Vec<DMatrix<f64>> = rows
            .iter()
            .map(|r| DMatrix::from_row_slice(1, r.len(), r))
            .collect();
        let mean = kron_mvprod(&mats, &self.alpha)?[0] + self.offset;
        if !with_variance {
            return Ok((mean, f64::NAN));
        }
        let proj: Vec<Vec<f64>> = rows
            .iter()
            .zip(&self.eigvecs)
            .map(|(r, q)| {
                q.tr_mul(&nalgebra::DVector::from_column_slice(r))
                    .iter()
                    .copied()
                    .collect()
            })
            .collect();
        let u = kron_vec(&proj);
        let quad: f64 = u.iter().zip(&self.denom).map(|(v, d)| v * v / d).sum();
        let prior: f64 = self.kernels.iter().map(Kernel::amplitude).product();
        Ok((mean, (prior - quad).max(0.0)))
    }

    /// Predictive mean and, if requested, latent variance at arbitrary points
    /// (one row per point).
    pub fn predict(
        &self,
        x_test: &DMatrix<f64>,
        with_variance: bool,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        if x_test.ncols() != self.spec.n_dims() {
            return Err(GpError::Shape {
                dim: x_test.ncols(),
                detail: format!("grid has {} axes", self.spec.n_dims()),
            });
        }
        let rows: Vec<(f64, f64)> = (0..x_test.nrows())
            .into_par_iter()
            .map(|i| {
                let p: Vec<f64> = x_test.row(i).iter().copied().collect();
                self.predict_point(&p, with_variance)
            })
            .collect::<Result<_>>()?;
        let (mean, var): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        Ok((mean, with_variance.then_some(var)))
    }

    /// Predictive means over a whole test grid by one rectangular Kronecker
    /// product, and variances per point if requested.
    pub fn predict_grid(
        &self,
        test: &GridSpec,
        with_variance: bool,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        if test.n_dims() != self.spec.n_dims() {
            return Err(GpError::Shape {
                dim: test.n_dims(),
                detail: format!("grid has {} axes", self.spec.n_dims()),
            });
        }
        let cross: Vec<DMatrix<f64>> = test
            .axes()
            .iter()
            .zip(self.spec.axes())
            .zip(&self.kernels)
            .map(|((t, a), k)| k.matrix(t, a))
            .collect();
        let mean: Vec<f64> = kron_mvprod(&cross, &self.alpha)?
            .into_iter()
            .map(|v| v + self.offset)
            .collect();
        if !with_variance {
            return Ok((mean, None));
        }
        let var = (0..test.len())
            .into_par_iter()
            .map(|i| self.predict_point(&test.point(i), true).map(|(_, v)| v))
            .collect::<Result<Vec<f64>>>()?;
        Ok((mean, Some(var)))
    }
}

/// Hyperparameters searched by [`grid_fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct GridHypers {
    pub order: MaternOrder,
    /// One shared lengthscale, or one per axis.
    pub lengthscales: Vec<f64>,
    /// Amplitude of the product kernel.
    pub amplitude: f64,
    pub noise: f64,
}

impl GridHypers {
    pub fn shared(order: MaternOrder, lengthscale: f64, amplitude: f64, noise: f64) -> Self {
        Self {
            order,
            lengthscales: vec![lengthscale],
            amplitude,
            noise,
        }
    }

    /// Per-axis kernels. The amplitude sits on the first axis.
    pub fn kernels(&self, n_dims: usize) -> Result<Vec<Kernel>> {
        if self.lengthscales.len() != 1 && self.lengthscales.len() != n_dims {
            return Err(invalid(format!(
                "{} lengthscales for {n_dims} axes",
                self.lengthscales.len()
            )));
        }
        (0..n_dims)
            .map(|d| {
                let l = if self.lengthscales.len() == 1 {
                    self.lengthscales[0]
                } else {
                    self.lengthscales[d]
                };
                Kernel::new(self.order, l, if d == 0 { self.amplitude } else { 1.0 })
            })
            .collect()
    }

    fn to_log(&self) -> Vec<f64> {
        self.lengthscales
            .iter()
            .map(|l| l.ln())
            .chain([self.amplitude.ln(), self.noise.ln()])
            .collect()
    }

    fn from_log(order: MaternOrder, v: &[f64]) -> Self {
        let k = v.len() - 2;
        Self {
            order,
            lengthscales: v[..k].iter().map(|x| x.exp()).collect(),
            amplitude: v[k].exp(),
            noise: v[k + 1].exp(),
        }
    }
}

/// Maximizes the grid marginal likelihood over log hyperparameters with a
/// Nelder-Mead search of at most `budget` solves. Targets are centred first.
pub fn grid_fit(
    spec: &GridSpec,
    y: &[f64],
    init: &GridHypers,
    budget: usize,
) -> Result<(GridGpModel, GridHypers)> {
    if y.len() != spec.len() {
        return Err(invalid(format!(
            "grid has {} points but y has {}",
            spec.len(),
            y.len()
        )));
    }
    let offset = y.iter().sum::<f64>() / y.len() as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - offset).collect();
    let d = spec.n_dims();
    let order = init.order;
    let objective = |v: &[f64]| -> f64 {
        if v.iter().any(|x| x.abs() > 30.0) {
            return f64::INFINITY;
        }
        let h = GridHypers::from_log(order, v);
        match h
            .kernels(d)
            .and_then(|ks| grid_solve(spec, &ks, h.noise, &yc))
        {
            Ok(m) if m.log_z.is_finite() => -m.log_z,
            _ => f64::INFINITY,
        }
    };
    let x0 = init.to_log();
    let start = objective(&x0);
    if !start.is_finite() {
        return Err(GpError::OptimizerFailure {
            reason: "initial hyperparameters give no finite evidence".into(),
            best: x0,
        });
    }
    let res = nelder_mead(objective, &x0, 0.5, budget.max(1), 1e-10);
    let best = if res.value <= start { res.x } else { x0 };
    let hypers = GridHypers::from_log(order, &best);
    let mut model = grid_solve(spec, &hypers.kernels(d)?, hypers.noise, &yc)?;
    model.offset = offset;
    Ok((model, hypers))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multi_index_is_last_fastest() {
        let g = GridSpec::new(vec![vec![0.0, 1.0], vec![0.0, 1.0, 2.0]]).unwrap();
        assert_eq!(g.multi_index(1), vec![0, 1]);
        assert_eq!(g.multi_index(3), vec![1, 0]);
        assert_eq!(g.point(5), vec![1.0, 2.0]);
    }

    #[test]
    fn identity_factors_leave_the_vector() {
        let b: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let mats = vec![
            DMatrix::identity(2, 2),
            DMatrix::identity(3, 3),
            DMatrix::identity(4, 4),
        ];
        assert_eq!(kron_mvprod(&mats, &b).unwrap(), b);
    }

    #[test]
    fn rejects_bad_axes() {
        assert!(GridSpec::new(vec![vec![0.0]]).is_err());
        assert!(GridSpec::new(vec![vec![0.0, 0.0]]).is_err());
        let err = kron_mvprod(&[DMatrix::identity(2, 2)], &[1.0; 3]).unwrap_err();
        assert!(matches!(err, GpError::Shape { .. }));
    }
}

//! Projection-pursuit GP regression.
//!
//! The model is `y = Σ_m f_m(X w_m) + ε` with a scalar state-space GP per
//! projection. Projections are added greedily: each new direction and its
//! kernel are fitted to the current residual by maximizing the scalar
//! marginal likelihood of `r | Xw`. All projected coordinates found so far
//! are then backfitted jointly with their learnt hyperparameters held fixed,
//! and the next residual is `y` minus that posterior mean. Predictions use the
//! same joint fit.
//!
//! Inputs are standardized per column before projecting.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::additive::{AdditiveModel, BackfitOptions, DimChain, VarianceMode};
use crate::error::{invalid, GpError, Result};
use crate::io::Standardizer;
use crate::kernels::{Kernel, MaternOrder};
use crate::optim::{lbfgs, GradientOptions};
use crate::statespace::log_z_gradient_projected;

#[derive(Clone, Debug)]
pub struct ProjectionOptions {
    /// Learn the direction; when false only the kernel (and noise) move.
    pub optimize_w: bool,
    pub optimize_noise: bool,
    pub gradient: GradientOptions,
    /// Number of starting directions; start 0 is the supplied one.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self {
            optimize_w: true,
            optimize_noise: true,
            gradient: GradientOptions::default(),
            restarts: 1,
            seed: 0,
        }
    }
}

/// One fitted projection.
#[derive(Clone, Debug)]
pub struct ProjectionFit {
    /// Unit-norm direction.
    pub w: Vec<f64>,
    pub kernel: Kernel,
    pub noise: f64,
    pub log_z: f64,
    pub initial_log_z: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Smallest noise variance a projection fit may reach, relative to `mean(r²)`.
pub const NOISE_FLOOR: f64 = 1e-10;

fn project(x: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    (x * DVector::from_column_slice(w))
        .iter()
        .copied()
        .collect()
}

fn check_spread(proj: &[f64]) -> Result<()> {
    let (lo, hi) = proj
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let scale = lo.abs().max(hi.abs()).max(1.0);
    if !(hi - lo > 1e-12 * scale) {
        return Err(GpError::DegenerateProjection(
            "projected inputs are constant".into(),
        ));
    }
    Ok(())
}

fn unit(w: &[f64]) -> Result<Vec<f64>> {
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-300 && norm.is_finite()) {
        return Err(GpError::DegenerateProjection(
            "projection weights vanish".into(),
        ));
    }
    Ok(w.iter().map(|v| v / norm).collect())
}

fn fit_from(
    x: &DMatrix<f64>,
    r: &[f64],
    w0: &[f64],
    kernel: &Kernel,
    noise: f64,
    opts: &ProjectionOptions,
) -> Result<ProjectionFit> {
    let n = r.len() as f64;
    let var_r = r.iter().map(|v| v * v).sum::<f64>() / n;
    let floor = NOISE_FLOOR * var_r.max(f64::MIN_POSITIVE);
    // σ² = floor + e^v keeps the filter well posed on noiseless data
    let to_noise = |v: f64| floor + v.exp();
    let from_noise = |s2: f64| (s2 - floor).max(floor).ln();
    let w0 = unit(w0)?;
    check_spread(&project(x, &w0))?;
    let order = kernel.order();
    let (initial_log_z, _) = log_z_gradient_projected(x, &w0, r, kernel, noise)?;
    let k_noise = usize::from(opts.optimize_noise);

    // With a free direction the lengthscale is pinned at 1 and absorbed into
    // `u = w / ℓ`; otherwise `w` is fixed and `log ℓ` is free.
    let (x0, result) = if opts.optimize_w {
        let mut v = vec![kernel.amplitude().ln()];
        if opts.optimize_noise {
            v.push(from_noise(noise));
        }
        v.extend(w0.iter().map(|wi| wi / kernel.lengthscale()));
        let f = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
            let k = Kernel::new(order, 1.0, v[0].exp())?;
            let s2 = if opts.optimize_noise {
                to_noise(v[1])
            } else {
                noise
            };
            let u = &v[1 + k_noise..];
            let (lz, g) = log_z_gradient_projected(x, u, r, &k, s2)?;
            let mut grad = vec![-g[1] / n];
            if opts.optimize_noise {
                grad.push(-g[2] * v[1].exp() / s2 / n);
            }
            grad.extend(g[3..].iter().map(|gi| -gi / n));
            Ok((-lz / n, grad))
        };
        let res = lbfgs(f, &v, opts.gradient)?;
        (v, res)
    } else {
        let mut v = vec![kernel.lengthscale().ln(), kernel.amplitude().ln()];
        if opts.optimize_noise {
            v.push(from_noise(noise));
        }
        let f = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
            let k = Kernel::new(order, v[0].exp(), v[1].exp())?;
            let s2 = if opts.optimize_noise {
                to_noise(v[2])
            } else {
                noise
            };
            let (lz, g) = log_z_gradient_projected(x, &w0, r, &k, s2)?;
            let mut grad: Vec<f64> = g[..2].iter().map(|gi| -gi / n).collect();
            if opts.optimize_noise {
                grad.push(-g[2] * v[2].exp() / s2 / n);
            }
            Ok((-lz / n, grad))
        };
        let res = lbfgs(f, &v, opts.gradient)?;
        (v, res)
    };
    if !result.value.is_finite() {
        return Err(GpError::OptimizerFailure {
            reason: "objective diverged".into(),
            best: x0,
        });
    }
    let v = &result.x;
    let (w, kernel, noise) = if opts.optimize_w {
        let u = &v[1 + k_noise..];
        let s = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let w = unit(u)?;
        let k = Kernel::new(order, 1.0 / s, v[0].exp())?;
        (
            w,
            k,
            if opts.optimize_noise {
                to_noise(v[1])
            } else {
                noise
            },
        )
    } else {
        let k = Kernel::new(order, v[0].exp(), v[1].exp())?;
        (
            w0,
            k,
            if opts.optimize_noise {
                to_noise(v[2])
            } else {
                noise
            },
        )
    };
    check_spread(&project(x, &w))?;
    let (log_z, _) = log_z_gradient_projected(x, &w, r, &kernel, noise)?;
    Ok(ProjectionFit {
        w,
        kernel,
        noise,
        log_z,
        initial_log_z,
        iterations: result.iterations,
        converged: result.converged,
    })
}

/// Fits one direction and scalar kernel to the residual `r` by maximizing
/// `log p(r | Xw, θ, σ²)`. The returned `w` has unit norm and the returned
/// lengthscale absorbs its scale, which leaves the evidence unchanged.
///
/// With `restarts > 1` further starts use random unit directions; the best
/// evidence wins and ties go to the lowest start index.
pub fn fit_projection(
    x: &DMatrix<f64>,
    r: &[f64],
    w_init: &[f64],
    kernel_init: &Kernel,
    noise_init: f64,
    opts: &ProjectionOptions,
) -> Result<ProjectionFit> {
    let d = x.ncols();
    if w_init.len() != d {
        return Err(GpError::Shape {
            dim: 1,
            detail: format!("{} weights for {d} columns", w_init.len()),
        });
    }
    if r.len() != x.nrows() || r.iter().any(|v| !v.is_finite()) {
        return Err(invalid("residual must be finite with one entry per row"));
    }
    let starts: Vec<Vec<f64>> = (0..opts.restarts.max(1))
        .map(|s| {
            if s == 0 {
                w_init.to_vec()
            } else {
                let mut rng = ChaCha20Rng::seed_from_u64(opts.seed.wrapping_add(s as u64));
                (0..d).map(|_| rng.sample(StandardNormal)).collect()
            }
        })
        .collect();
    let fits: Vec<Result<ProjectionFit>> = starts
        .par_iter()
        .map(|w0| fit_from(x, r, w0, kernel_init, noise_init, opts))
        .collect();
    let mut best: Option<ProjectionFit> = None;
    let mut first_err = None;
    for fit in fits {
        match fit {
            Ok(f) => {
                if best.as_ref().is_none_or(|b| f.log_z > b.log_z) {
                    best = Some(f);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one start"))
}

/// Least-squares regression weights of `r` on the columns of `x`, with a
/// ridge of `1e-6 · tr(XᵀX)` when `XᵀX` is singular.
pub fn least_squares_direction(x: &DMatrix<f64>, r: &[f64]) -> Vec<f64> {
    let xtx = x.tr_mul(x);
    let xtr = x.tr_mul(&DVector::from_column_slice(r));
    let scale = xtx.diagonal().max().max(f64::MIN_POSITIVE);
    let well_posed = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        c.l().diagonal().iter().all(|v| v * v > 1e-12 * scale)
    };
    let sol = xtx
        .clone()
        .cholesky()
        .filter(well_posed)
        .map(|c| c.solve(&xtr))
        .or_else(|| {
            let ridge = 1e-6 * xtx.trace().max(f64::MIN_POSITIVE);
            let mut a = xtx;
            for i in 0..a.nrows() {
                a[(i, i)] += ridge;
            }
            a.cholesky().map(|c| c.solve(&xtr))
        });
    sol.map_or_else(|| vec![0.0; x.ncols()], |s| s.iter().copied().collect())
}

#[derive(Clone, Debug)]
pub struct PpgprOptions {
    pub max_projections: usize,
    /// Stop once the training NMSE improves by less than this.
    pub nmse_tol: f64,
    pub order: MaternOrder,
    pub projection: ProjectionOptions,
    pub backfit: BackfitOptions,
}

impl Default for PpgprOptions {
    fn default() -> Self {
        Self {
            max_projections: 10,
            nmse_tol: 1e-3,
            order: MaternOrder::SevenHalves,
            projection: ProjectionOptions::default(),
            backfit: BackfitOptions {
                tol: 1e-6,
                max_sweeps: 500,
                strict: false,
                ..BackfitOptions::default()
            },
        }
    }
}

/// A fitted projected additive model.
#[derive(Clone, Debug)]
pub struct ProjectedAdditiveModel {
    standardizer: Standardizer,
    /// `D × M`, unit-norm columns, acting on standardized inputs.
    projections: DMatrix<f64>,
    fits: Vec<ProjectionFit>,
    nmse_trace: Vec<f64>,
    model: AdditiveModel,
}

impl ProjectedAdditiveModel {
    pub fn projections(&self) -> &DMatrix<f64> {
        &self.projections
    }

    pub fn n_projections(&self) -> usize {
        self.projections.ncols()
    }

    pub fn kernels(&self) -> &[Kernel] {
        self.model.kernels()
    }

    pub fn noise(&self) -> f64 {
        self.model.noise()
    }

    pub fn offset(&self) -> f64 {
        self.model.offset()
    }

    /// Training NMSE of the joint posterior mean after each projection.
    pub fn nmse_trace(&self) -> &[f64] {
        &self.nmse_trace
    }

    pub fn projection_fits(&self) -> &[ProjectionFit] {
        &self.fits
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    /// Standardized inputs projected onto every direction, one column each.
    pub fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.standardizer.apply(x)? * &self.projections)
    }

    /// Predictive mean and factorized variance (plus `σ_n²` if asked).
    pub fn predict(
        &self,
        x_test: &DMatrix<f64>,
        include_noise: bool,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.model.predict(
            &self.features(x_test)?,
            include_noise,
            VarianceMode::Factorized,
        )
    }
}

/// Greedy projection pursuit: up to `max_projections` directions, each
/// initialised by least squares on the current residual.
pub fn ppgpr_greedy(
    x: &DMatrix<f64>,
    y: &[f64],
    opts: &PpgprOptions,
) -> Result<ProjectedAdditiveModel> {
    let (n, d) = x.shape();
    if y.len() != n || n < 2 || d == 0 {
        return Err(invalid(format!(
            "need at least 2 rows, one column and {n} targets; got {}",
            y.len()
        )));
    }
    if opts.max_projections == 0 {
        return Err(invalid("at least one projection is required"));
    }
    let standardizer = Standardizer::fit(x);
    let xs = standardizer.apply(x)?;
    let mean = y.iter().sum::<f64>() / n as f64;
    let mut r: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let var_y = (r.iter().map(|v| v * v).sum::<f64>() / n as f64).max(f64::MIN_POSITIVE);

    let mut fits: Vec<ProjectionFit> = Vec::new();
    let mut trace: Vec<f64> = Vec::new();
    let mut model: Option<AdditiveModel> = None;
    let mut prev = 1.0;
    for _ in 0..opts.max_projections {
        let var_r = (r.iter().map(|v| v * v).sum::<f64>() / n as f64).max(1e-12 * var_y);
        let mut w0 = least_squares_direction(&xs, &r);
        if w0.iter().all(|v| *v == 0.0) {
            w0[0] = 1.0;
        }
        let k0 = Kernel::new(opts.order, 1.0, var_r)?;
        let fit = fit_projection(&xs, &r, &w0, &k0, 0.1 * var_r, &opts.projection)?;
        let chain = DimChain::new(&project(&xs, &fit.w), &fit.kernel)?;
        let f_new = chain.smooth_mean(&r, &vec![fit.noise; n])?;

        let noise = fit.noise;
        let mut candidate = fits.clone();
        candidate.push(fit);
        let projections = DMatrix::from_fn(d, candidate.len(), |i, j| candidate[j].w[i]);
        let kernels: Vec<Kernel> = candidate.iter().map(|f| f.kernel).collect();
        let mut init: Vec<Vec<f64>> = model
            .as_ref()
            .map_or_else(Vec::new, |m| m.components().to_vec());
        init.push(f_new);
        let joint = AdditiveModel::fit_from(
            &(&xs * &projections),
            y,
            &kernels,
            noise,
            Some(init),
            &opts.backfit,
        )?;
        let fitted = joint.fitted();
        let resid: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let nmse = resid.iter().map(|v| v * v).sum::<f64>() / n as f64 / var_y;
        if nmse > prev && !fits.is_empty() {
            break;
        }
        fits = candidate;
        trace.push(nmse);
        model = Some(joint);
        r = resid;
        if prev - nmse < opts.nmse_tol {
            break;
        }
        prev = nmse;
    }

    let projections = DMatrix::from_fn(d, fits.len(), |i, j| fits[j].w[i]);
    let model = model.expect("at least one projection");
    Ok(ProjectedAdditiveModel {
        standardizer,
        projections,
        fits,
        nmse_trace: trace,
        model,
    })
}

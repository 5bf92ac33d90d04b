//! Additive GP regression `y = Σ_d f_d(x_d) + ε` with one state-space chain
//! per input dimension.
//!
//! Backfitting cycles over dimensions, smoothing the partial residual
//! `y − Σ_{j≠d} μ_j` with the scalar smoother of dimension `d`. This is
//! block Gauss-Seidel on `(K_add + Σ) α = y`, so at its fixed point
//! `μ_d = K_d α` and `Σ_d μ_d` is the exact posterior mean.

mod mcmc;
mod vb;

pub use mcmc::{
    batch_means_se, mcmc_fit, sample_noise_precision, HyperPrior, McmcOptions, McmcResult,
    McmcTrace,
};
pub use vb::{heuristic_init, vbem_fit, MStep, VbOptions, VbResult};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, GpError, Result};
use crate::kernels::Kernel;
use crate::statespace::{predict_1d, sort_permutation, Chain, SmootherResult, SortedSeries};

/// Speed-up applied on top of plain Gauss-Seidel sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Acceleration {
    /// Plain cyclic backfitting.
    None,
    /// Anderson mixing of the last `memory` sweeps.
    Anderson { memory: usize },
}

/// Stopping rule and acceleration for [`backfit`].
#[derive(Clone, Copy, Debug)]
pub struct BackfitOptions {
    /// Stop when `max_d ‖Δμ_d‖∞ / (‖y‖∞ + ε)` over one sweep is below this.
    pub tol: f64,
    pub max_sweeps: usize,
    pub acceleration: Acceleration,
    /// Subtract the mean of `y` before fitting.
    pub center: bool,
    /// Fail when `max_sweeps` is reached; otherwise return the last iterate
    /// with `converged == false`.
    pub strict: bool,
}

impl Default for BackfitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 100,
            acceleration: Acceleration::Anderson { memory: 10 },
            center: true,
            strict: true,
        }
    }
}

/// Per-dimension posterior means from [`backfit`], in the caller's row order.
#[derive(Clone, Debug)]
pub struct BackfitResult {
    pub components: Vec<Vec<f64>>,
    /// Mean removed from `y` before fitting (zero when not centering).
    pub offset: f64,
    pub sweeps: usize,
    /// Relative change of each sweep.
    pub change_trace: Vec<f64>,
    pub converged: bool,
}

impl BackfitResult {
    /// `Σ_d μ_d` without the offset.
    pub fn total(&self) -> Vec<f64> {
        let n = self.components.first().map_or(0, Vec::len);
        let mut t = vec![0.0; n];
        for c in &self.components {
            for (ti, ci) in t.iter_mut().zip(c) {
                *ti += ci;
            }
        }
        t
    }
}

/// The discretized chain of one input dimension.
#[derive(Clone, Debug)]
pub struct DimChain {
    perm: Vec<usize>,
    chain: Chain,
}

impl DimChain {
    pub fn new(column: &[f64], kernel: &Kernel) -> Result<Self> {
        if let Some(i) = column.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("input {i} is not finite")));
        }
        let perm = sort_permutation(column);
        let sorted: Vec<f64> = perm.iter().map(|&i| column[i]).collect();
        Ok(Self {
            chain: Chain::new(&kernel.to_state_space(), &sorted)?,
            perm,
        })
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    fn gather(&self, v: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&i| v[i]).collect()
    }

    fn scatter(&self, sorted: &[f64], out: &mut [f64]) {
        for (k, &i) in self.perm.iter().enumerate() {
            out[i] = sorted[k];
        }
    }

    /// Smoothed mean of `f_d` for targets and noise in the caller's order.
    pub fn smooth_mean(&self, targets: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
        let (mu, _) = self
            .chain
            .smooth_f_mean(&self.gather(targets), &self.gather(noise))?;
        let mut out = vec![0.0; mu.len()];
        self.scatter(&mu, &mut out);
        Ok(out)
    }

    /// Full smoother output in sorted order, plus `log p(targets)`.
    pub fn smooth_full(&self, targets: &[f64], noise: &[f64]) -> Result<SmootherResult> {
        let ys = self.gather(targets);
        let rs = self.gather(noise);
        let pass = self.chain.filter(&ys, &rs)?;
        let sm = self.chain.smooth(&pass)?;
        Ok(SmootherResult {
            filtered_means: pass.means,
            filtered_covs: pass.covs,
            means: sm.means,
            covs: sm.covs,
            cross: sm.cross,
            log_z: pass.log_z,
        })
    }

    /// `log p(targets)` of the scalar model of this dimension.
    pub fn log_z(&self, targets: &[f64], noise: &[f64]) -> Result<f64> {
        Ok(self
            .chain
            .filter(&self.gather(targets), &self.gather(noise))?
            .log_z)
    }

    /// Maps a sorted-order vector back to the caller's order.
    pub fn to_original(&self, sorted: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; sorted.len()];
        self.scatter(sorted, &mut out);
        out
    }
}

/// One chain per input column.
#[derive(Clone, Debug)]
pub struct AdditiveChains {
    n: usize,
    dims: Vec<DimChain>,
}

impl AdditiveChains {
    pub fn new(x: &DMatrix<f64>, kernels: &[Kernel]) -> Result<Self> {
        let (n, d) = x.shape();
        if d == 0 || n == 0 {
            return Err(invalid(
                "additive model needs at least one row and one column",
            ));
        }
        if kernels.len() != d {
            return Err(GpError::Shape {
                dim: d,
                detail: format!("{} kernels for {d} input columns", kernels.len()),
            });
        }
        let dims = (0..d)
            .into_par_iter()
            .map(|j| DimChain::new(x.column(j).as_slice(), &kernels[j]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n, dims })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dims(&self) -> &[DimChain] {
        &self.dims
    }

    pub fn n_dims(&self) -> usize {
        self.dims.len()
    }
}

/// One Gauss-Seidel sweep over dimensions `0..D`, updating `components` in
/// place. Returns `max_d ‖Δμ_d‖∞`.
pub fn backfit_sweep(
    chains: &AdditiveChains,
    y: &[f64],
    noise: &[f64],
    components: &mut [Vec<f64>],
) -> Result<f64> {
    let n = chains.len();
    let mut total = vec![0.0; n];
    for c in components.iter() {
        for (t, v) in total.iter_mut().zip(c) {
            *t += v;
        }
    }
    let mut max_change: f64 = 0.0;
    let mut resid = vec![0.0; n];
    for (d, dim) in chains.dims.iter().enumerate() {
        let old = &components[d];
        for i in 0..n {
            resid[i] = y[i] - (total[i] - old[i]);
        }
        let new = dim.smooth_mean(&resid, noise)?;
        for i in 0..n {
            let delta = new[i] - old[i];
            max_change = max_change.max(delta.abs());
            total[i] += delta;
        }
        components[d] = new;
    }
    Ok(max_change)
}

fn flatten(components: &[Vec<f64>]) -> Vec<f64> {
    components.iter().flat_map(|c| c.iter().copied()).collect()
}

fn unflatten(u: &[f64], n: usize) -> Vec<Vec<f64>> {
    u.chunks(n).map(<[f64]>::to_vec).collect()
}

/// Anderson mixing history for a fixed-point map `u ↦ G(u)`.
struct Anderson {
    memory: usize,
    df: Vec<DVector<f64>>,
    dg: Vec<DVector<f64>>,
    prev: Option<(DVector<f64>, DVector<f64>)>,
    best_residual: f64,
}

impl Anderson {
    fn new(memory: usize) -> Self {
        Self {
            memory,
            df: vec![],
            dg: vec![],
            prev: None,
            best_residual: f64::INFINITY,
        }
    }

    fn reset(&mut self) {
        self.df.clear();
        self.dg.clear();
        self.prev = None;
    }

    /// Next iterate given `g = G(u)` and `f = G(u) − u`.
    fn step(&mut self, g: DVector<f64>, f: DVector<f64>) -> DVector<f64> {
        let fnorm = f.norm();
        if fnorm > 10.0 * self.best_residual {
            self.reset();
        }
        self.best_residual = self.best_residual.min(fnorm);
        if let Some((g_prev, f_prev)) = self.prev.take() {
            self.df.push(&f - f_prev);
            self.dg.push(&g - g_prev);
            if self.df.len() > self.memory {
                self.df.remove(0);
                self.dg.remove(0);
            }
        }
        self.prev = Some((g.clone(), f.clone()));
        let k = self.df.len();
        if k == 0 {
            return g;
        }
        let mut gram = DMatrix::from_fn(k, k, |i, j| self.df[i].dot(&self.df[j]));
        let rhs = DVector::from_fn(k, |i, _| self.df[i].dot(&f));
        let reg = 1e-10 * gram.trace().max(f64::MIN_POSITIVE);
        for i in 0..k {
            gram[(i, i)] += reg;
        }
        let Some(chol) = gram.cholesky() else {
            self.reset();
            self.prev = Some((g.clone(), f));
            return g;
        };
        let gamma = chol.solve(&rhs);
        let mut next = g;
        for i in 0..k {
            next.axpy(-gamma[i], &self.dg[i], 1.0);
        }
        if next.iter().any(|v| !v.is_finite()) {
            let (g, f) = self.prev.take().expect("just stored");
            self.reset();
            self.prev = Some((g.clone(), f));
            return g;
        }
        next
    }
}

/// Backfitting from an initial guess with per-observation noise.
pub fn backfit_from(
    chains: &AdditiveChains,
    y: &[f64],
    noise: &[f64],
    init: Option<Vec<Vec<f64>>>,
    opts: &BackfitOptions,
) -> Result<BackfitResult> {
    let n = chains.len();
    let d = chains.n_dims();
    if y.len() != n || noise.len() != n {
        return Err(invalid(format!(
            "expected {n} targets and noise values, got {} and {}",
            y.len(),
            noise.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(invalid("targets must be finite"));
    }
    if noise.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid("noise variances must be positive and finite"));
    }
    let offset = if opts.center {
        y.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    let yc: Vec<f64> = y.iter().map(|v| v - offset).collect();
    let scale = yc.iter().fold(0.0f64, |a, v| a.max(v.abs())) + 1e-12;
    let mut components = match init {
        Some(c) if c.len() == d && c.iter().all(|v| v.len() == n) => c,
        Some(_) => return Err(invalid("initial components have the wrong shape")),
        None => vec![vec![0.0; n]; d],
    };
    let mut trace = Vec::new();
    let mut anderson = match opts.acceleration {
        Acceleration::Anderson { memory } if memory > 0 => Some(Anderson::new(memory)),
        _ => None,
    };
    for sweep in 1..=opts.max_sweeps {
        let before = anderson.as_ref().map(|_| flatten(&components));
        let change = backfit_sweep(chains, &yc, noise, &mut components)? / scale;
        trace.push(change);
        if change < opts.tol {
            return Ok(BackfitResult {
                components,
                offset,
                sweeps: sweep,
                change_trace: trace,
                converged: true,
            });
        }
        if !change.is_finite() {
            break;
        }
        if let (Some(acc), Some(before)) = (anderson.as_mut(), before) {
            let g = DVector::from_vec(flatten(&components));
            let f = &g - DVector::from_vec(before);
            let next = acc.step(g, f);
            components = unflatten(next.as_slice(), n);
        }
    }
    let last_change = trace.last().copied().unwrap_or(f64::NAN);
    if opts.strict || !last_change.is_finite() {
        return Err(GpError::NotConverged {
            sweeps: opts.max_sweeps,
            last_change,
        });
    }
    Ok(BackfitResult {
        components,
        offset,
        sweeps: opts.max_sweeps,
        change_trace: trace,
        converged: false,
    })
}

/// Posterior means of every additive component under homoscedastic noise.
pub fn backfit(
    x: &DMatrix<f64>,
    y: &[f64],
    kernels: &[Kernel],
    noise: f64,
    opts: &BackfitOptions,
) -> Result<BackfitResult> {
    if !(noise > 0.0 && noise.is_finite()) {
        return Err(invalid("noise variance must be positive"));
    }
    let chains = AdditiveChains::new(x, kernels)?;
    backfit_from(&chains, y, &vec![noise; y.len()], None, opts)
}

/// How predictive variances are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum VarianceMode {
    /// Sum of per-dimension variances from the factorized posterior.
    #[default]
    Factorized,
    /// Exact additive-GP variance; one backfit per test point.
    Exact,
}

/// A fitted additive model with fixed hyperparameters.
#[derive(Clone, Debug)]
pub struct AdditiveModel {
    kernels: Vec<Kernel>,
    noise: f64,
    offset: f64,
    x: DMatrix<f64>,
    centered: Vec<f64>,
    components: Vec<Vec<f64>>,
    chains: AdditiveChains,
    backfit_options: BackfitOptions,
}

impl AdditiveModel {
    /// Fits posterior means by backfitting.
    pub fn fit(
        x: &DMatrix<f64>,
        y: &[f64],
        kernels: &[Kernel],
        noise: f64,
        opts: &BackfitOptions,
    ) -> Result<Self> {
        Self::fit_from(x, y, kernels, noise, None, opts)
    }

    /// As [`AdditiveModel::fit`], starting backfitting from `init`.
    pub fn fit_from(
        x: &DMatrix<f64>,
        y: &[f64],
        kernels: &[Kernel],
        noise: f64,
        init: Option<Vec<Vec<f64>>>,
        opts: &BackfitOptions,
    ) -> Result<Self> {
        if !(noise > 0.0 && noise.is_finite()) {
            return Err(invalid("noise variance must be positive"));
        }
        let chains = AdditiveChains::new(x, kernels)?;
        let fit = backfit_from(&chains, y, &vec![noise; y.len()], init, opts)?;
        Ok(Self {
            kernels: kernels.to_vec(),
            noise,
            offset: fit.offset,
            x: x.clone(),
            centered: y.iter().map(|v| v - fit.offset).collect(),
            components: fit.components,
            chains,
            backfit_options: *opts,
        })
    }

    /// Assembles a model from converged components, e.g. after VB.
    pub fn from_parts(
        x: &DMatrix<f64>,
        y: &[f64],
        kernels: &[Kernel],
        noise: f64,
        offset: f64,
        components: Vec<Vec<f64>>,
        backfit_options: BackfitOptions,
    ) -> Result<Self> {
        let chains = AdditiveChains::new(x, kernels)?;
        if components.len() != kernels.len() || components.iter().any(|c| c.len() != y.len()) {
            return Err(invalid("components have the wrong shape"));
        }
        Ok(Self {
            kernels: kernels.to_vec(),
            noise,
            offset,
            x: x.clone(),
            centered: y.iter().map(|v| v - offset).collect(),
            components,
            chains,
            backfit_options,
        })
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Posterior means `μ_d` at the training inputs, caller's row order.
    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    /// `offset + Σ_d μ_d` at the training inputs.
    pub fn fitted(&self) -> Vec<f64> {
        let mut t = vec![self.offset; self.centered.len()];
        for c in &self.components {
            for (ti, ci) in t.iter_mut().zip(c) {
                *ti += ci;
            }
        }
        t
    }

    pub fn chains(&self) -> &AdditiveChains {
        &self.chains
    }

    /// Residual `y − Σ_{j≠d} μ_j` seen by dimension `d`.
    pub fn partial_residual(&self, d: usize) -> Vec<f64> {
        let n = self.centered.len();
        (0..n)
            .map(|i| {
                self.centered[i]
                    - (0..self.components.len())
                        .filter(|&j| j != d)
                        .map(|j| self.components[j][i])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Predictive mean and variance at the rows of `x_test`. Variances are
    /// for the latent `f` unless `include_noise` is set.
    pub fn predict(
        &self,
        x_test: &DMatrix<f64>,
        include_noise: bool,
        mode: VarianceMode,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.kernels.len();
        if x_test.ncols() != d {
            return Err(GpError::Shape {
                dim: d,
                detail: format!("test inputs have {} columns", x_test.ncols()),
            });
        }
        let m = x_test.nrows();
        let per_dim = (0..d)
            .into_par_iter()
            .map(|j| {
                let series = SortedSeries::new(
                    self.x.column(j).as_slice(),
                    &self.partial_residual(j),
                    self.noise,
                )?;
                predict_1d(
                    &series,
                    &self.kernels[j].to_state_space(),
                    x_test.column(j).as_slice(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mean = vec![self.offset; m];
        let mut var = vec![0.0; m];
        for (mu, v) in &per_dim {
            for i in 0..m {
                mean[i] += mu[i];
                var[i] += v[i];
            }
        }
        if mode == VarianceMode::Exact {
            var = self.exact_variance(x_test)?;
        }
        if include_noise {
            for v in &mut var {
                *v += self.noise;
            }
        }
        Ok((mean, var))
    }

    /// `k(x*,x*) − k*ᵀ (K_add + σ²I)⁻¹ k*` by one backfit per test row.
    fn exact_variance(&self, x_test: &DMatrix<f64>) -> Result<Vec<f64>> {
        let n = self.x.nrows();
        let noise = vec![self.noise; n];
        let opts = BackfitOptions {
            center: false,
            tol: self.backfit_options.tol.min(1e-12),
            max_sweeps: self.backfit_options.max_sweeps.max(1000),
            ..self.backfit_options
        };
        (0..x_test.nrows())
            .into_par_iter()
            .map(|t| {
                let kstar: Vec<f64> = (0..n)
                    .map(|i| {
                        self.kernels
                            .iter()
                            .enumerate()
                            .map(|(j, k)| k.eval(x_test[(t, j)] - self.x[(i, j)]))
                            .sum()
                    })
                    .collect();
                let prior: f64 = self.kernels.iter().map(Kernel::amplitude).sum();
                let fit = backfit_from(&self.chains, &kstar, &noise, None, &opts)?;
                let total = fit.total();
                let quad: f64 = (0..n)
                    .map(|i| kstar[i] * (kstar[i] - total[i]))
                    .sum::<f64>()
                    / self.noise;
                Ok((prior - quad).max(0.0))
            })
            .collect()
    }
}

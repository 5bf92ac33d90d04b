//! Variational Bayes EM for the additive model with a posterior factorized
//! over dimensions, `q(Z) = Π_d q(Z_d)`.
//!
//! The E-step is backfitting: each `q(Z_d)` is the scalar smoother posterior
//! given the pseudo-observations `y − Σ_{j≠d} E[f_j]`. At the E-step fixed
//! point the lower bound has the closed form
//! `Σ_d log Z_d(r_d) + (D−1)[N/2·log(2πσ²) + ‖y − Σ_d μ_d‖²/(2σ²)]`.

use nalgebra::DMatrix;

use super::{backfit_from, AdditiveChains, AdditiveModel, BackfitOptions, DimChain, VarianceMode};
use crate::error::{invalid, Result};
use crate::kernels::{Kernel, MaternOrder};
use crate::linalg::SmallMat;
use crate::optim::{nonlinear_cg, GradientOptions};
use crate::statespace::{log_z_gradient, SortedSeries};

/// Objective maximized over each `θ_d` in the M-step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MStep {
    /// `log Z_d` of the scalar model on its pseudo-observations, with
    /// `q(Z_d)` refreshed after each dimension.
    #[default]
    Collapsed,
    /// Expected complete-data log-likelihood of chain `d` under the current
    /// `q(Z_d)`, built from `E[z]`, `V[z]` and `E[z_t z_{t+1}ᵀ]`.
    ExpectedStatistics,
}

#[derive(Clone, Copy, Debug)]
pub struct VbOptions {
    /// Number of M-steps; each is followed by an E-step.
    pub outer_iters: usize,
    pub m_step: MStep,
    /// Conjugate-gradient iterations per dimension and M-step.
    pub cg_iters: usize,
    pub backfit: BackfitOptions,
    pub learn_hypers: bool,
    pub learn_noise: bool,
    /// Stop early once the bound improves by less than this (relative).
    pub elbo_tol: f64,
}

impl Default for VbOptions {
    fn default() -> Self {
        Self {
            outer_iters: 10,
            m_step: MStep::Collapsed,
            cg_iters: 50,
            backfit: BackfitOptions {
                max_sweeps: 500,
                ..BackfitOptions::default()
            },
            learn_hypers: true,
            learn_noise: true,
            elbo_tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VbResult {
    pub kernels: Vec<Kernel>,
    pub noise: f64,
    pub offset: f64,
    /// `E_q[f_d]` at the training inputs, caller's order.
    pub component_means: Vec<Vec<f64>>,
    /// `V_q[f_d]` at the training inputs, caller's order.
    pub component_variances: Vec<Vec<f64>>,
    /// Lower bound after every E-step.
    pub elbo_trace: Vec<f64>,
    /// Latent predictive mean and factorized variance at the test inputs.
    pub prediction: Option<(Vec<f64>, Vec<f64>)>,
    pub model: AdditiveModel,
}

/// Starting hyperparameters from the data: `ℓ_d = range_d/√N`,
/// `σ_f² = var(y)/D`, `σ_n² = var(y)/10`.
pub fn heuristic_init(
    x: &DMatrix<f64>,
    y: &[f64],
    order: MaternOrder,
) -> Result<(Vec<Kernel>, f64)> {
    let (n, d) = x.shape();
    let mean = y.iter().sum::<f64>() / n as f64;
    let var = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).max(1e-12);
    let kernels = (0..d)
        .map(|j| {
            let col = x.column(j);
            let range = (col.max() - col.min()).max(1e-12);
            Kernel::new(order, range / (n as f64).sqrt(), var / d as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((kernels, 0.1 * var))
}

struct EStats {
    elbo: f64,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

fn residual(y: &[f64], comps: &[Vec<f64>], skip: Option<usize>) -> Vec<f64> {
    (0..y.len())
        .map(|i| {
            y[i] - comps
                .iter()
                .enumerate()
                .filter(|(j, _)| Some(*j) != skip)
                .map(|(_, c)| c[i])
                .sum::<f64>()
        })
        .collect()
}

/// Lower bound and marginal moments at an E-step fixed point.
fn e_stats(chains: &AdditiveChains, y: &[f64], comps: &[Vec<f64>], noise: f64) -> Result<EStats> {
    let n = y.len();
    let d = chains.n_dims();
    let nv = vec![noise; n];
    let mut log_z = 0.0;
    let mut means = Vec::with_capacity(d);
    let mut variances = Vec::with_capacity(d);
    for (j, dim) in chains.dims().iter().enumerate() {
        let r = residual(y, comps, Some(j));
        let sm = dim.smooth_full(&r, &nv)?;
        log_z += sm.log_z;
        means.push(dim.to_original(&sm.f_mean()));
        variances.push(dim.to_original(&sm.f_var()));
    }
    let e = residual(y, comps, None);
    let sse: f64 = e.iter().map(|v| v * v).sum();
    let elbo = log_z
        + (d as f64 - 1.0)
            * (0.5 * n as f64 * (2.0 * std::f64::consts::PI * noise).ln() + sse / (2.0 * noise));
    Ok(EStats {
        elbo,
        means,
        variances,
    })
}

fn collapsed_update(
    column: &[f64],
    r: &[f64],
    kernel: &Kernel,
    noise: f64,
    iters: usize,
) -> Result<Kernel> {
    let series = SortedSeries::new(column, r, noise)?;
    let order = kernel.order();
    let objective = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let k = Kernel::from_hypers(
            order,
            crate::kernels::Hyperparameters::from_log(p[0], p[1])?,
        );
        let (lz, g) = log_z_gradient(&series, &k)?;
        Ok((-lz, vec![-g[0], -g[1]]))
    };
    let x0 = [
        kernel.hypers().log_lengthscale(),
        kernel.hypers().log_amplitude(),
    ];
    let opts = GradientOptions {
        max_iter: iters,
        grad_tol: 1e-6,
        f_tol: 1e-12,
        memory: 0,
    };
    let res = nonlinear_cg(objective, &x0, opts)?;
    kernel.with_log_hypers(res.x[0], res.x[1])
}

/// Negative expected complete-data log-likelihood of one chain.
fn expected_nll(
    sorted_x: &[f64],
    kernel: &Kernel,
    sm: &crate::statespace::SmootherResult,
) -> Option<f64> {
    let ssm = kernel.to_state_space();
    let second = |t: usize| sm.covs[t] + sm.means[t].outer(&sm.means[t]);
    let (ld, tr) = ssm.stationary_cov().logdet_and_trace_solve(&second(0))?;
    let mut total = ld + tr;
    for t in 0..sorted_x.len().saturating_sub(1) {
        let delta = sorted_x[t + 1] - sorted_x[t];
        if delta == 0.0 {
            continue;
        }
        let disc = ssm.discretize_unchecked(delta);
        let c = sm.cross[t];
        let pc = disc.phi * c;
        let e: SmallMat =
            (second(t + 1) - pc - pc.transpose() + disc.phi.congruence(&second(t))).symmetrize();
        let (ld, tr) = disc.q.logdet_and_trace_solve(&e)?;
        total += ld + tr;
    }
    Some(0.5 * total)
}

fn statistics_update(
    dim: &DimChain,
    column: &[f64],
    r: &[f64],
    kernel: &Kernel,
    noise: f64,
    iters: usize,
) -> Result<Kernel> {
    let sm = dim.smooth_full(r, &vec![noise; r.len()])?;
    let sorted: Vec<f64> = dim.permutation().iter().map(|&i| column[i]).collect();
    let order = kernel.order();
    let f = |p: &[f64]| -> Option<f64> {
        let k = Kernel::from_hypers(
            order,
            crate::kernels::Hyperparameters::from_log(p[0], p[1]).ok()?,
        );
        expected_nll(&sorted, &k, &sm)
    };
    let objective = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let v = f(p).ok_or_else(|| invalid("expected statistics objective undefined"))?;
        let h = 1e-5;
        let mut g = vec![0.0; 2];
        for i in 0..2 {
            let mut up = p.to_vec();
            let mut dn = p.to_vec();
            up[i] += h;
            dn[i] -= h;
            let (a, b) = (f(&up), f(&dn));
            g[i] = match (a, b) {
                (Some(a), Some(b)) => (a - b) / (2.0 * h),
                _ => return Err(invalid("expected statistics gradient undefined")),
            };
        }
        Ok((v, g))
    };
    let x0 = [
        kernel.hypers().log_lengthscale(),
        kernel.hypers().log_amplitude(),
    ];
    let opts = GradientOptions {
        max_iter: iters,
        grad_tol: 1e-6,
        f_tol: 1e-12,
        memory: 0,
    };
    match nonlinear_cg(objective, &x0, opts) {
        Ok(res) => kernel.with_log_hypers(res.x[0], res.x[1]),
        // The objective is undefined when some Q_t is numerically singular;
        // fall back to the collapsed update for this dimension.
        Err(_) => collapsed_update(column, r, kernel, noise, iters),
    }
}

/// Variational Bayes EM. `init` defaults to [`heuristic_init`] with the
/// Matérn(7/2) kernel.
pub fn vbem_fit(
    x: &DMatrix<f64>,
    y: &[f64],
    init: Option<(&[Kernel], f64)>,
    x_test: Option<&DMatrix<f64>>,
    opts: &VbOptions,
) -> Result<VbResult> {
    let n = x.nrows();
    if y.len() != n || n == 0 {
        return Err(invalid(format!(
            "expected {n} > 0 targets, got {}",
            y.len()
        )));
    }
    let (mut kernels, mut noise) = match init {
        Some((k, s)) => (k.to_vec(), s),
        None => heuristic_init(x, y, MaternOrder::SevenHalves)?,
    };
    if !(noise > 0.0 && noise.is_finite()) {
        return Err(invalid("noise variance must be positive"));
    }
    let offset = y.iter().sum::<f64>() / n as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - offset).collect();
    let bf_opts = BackfitOptions {
        center: false,
        ..opts.backfit
    };
    let learning = opts.learn_hypers || opts.learn_noise;
    let mut comps: Option<Vec<Vec<f64>>> = None;
    let mut trace = Vec::new();
    let mut stats;
    let mut it = 0;
    loop {
        let chains = AdditiveChains::new(x, &kernels)?;
        let bf = backfit_from(&chains, &yc, &vec![noise; n], comps.take(), &bf_opts)?;
        stats = e_stats(&chains, &yc, &bf.components, noise)?;
        let improved = trace.last().map_or(f64::INFINITY, |last: &f64| {
            (stats.elbo - last) / last.abs().max(1.0)
        });
        trace.push(stats.elbo);
        comps = Some(bf.components);
        if !learning || it >= opts.outer_iters || improved < opts.elbo_tol {
            break;
        }
        it += 1;

        let c = comps.as_mut().expect("set above");
        let mut variances = stats.variances.clone();
        if opts.learn_hypers {
            for j in 0..kernels.len() {
                let column: Vec<f64> = x.column(j).iter().copied().collect();
                let r = residual(&yc, c, Some(j));
                let dim = &chains.dims()[j];
                let new_kernel = match opts.m_step {
                    MStep::Collapsed => {
                        collapsed_update(&column, &r, &kernels[j], noise, opts.cg_iters)?
                    }
                    MStep::ExpectedStatistics => {
                        statistics_update(dim, &column, &r, &kernels[j], noise, opts.cg_iters)?
                    }
                };
                kernels[j] = new_kernel;
                if opts.m_step == MStep::Collapsed {
                    let fresh = DimChain::new(&column, &kernels[j])?;
                    let sm = fresh.smooth_full(&r, &vec![noise; n])?;
                    c[j] = fresh.to_original(&sm.f_mean());
                    variances[j] = fresh.to_original(&sm.f_var());
                }
            }
        }
        if opts.learn_noise {
            let e = residual(&yc, c, None);
            let sse: f64 = e.iter().map(|v| v * v).sum();
            let tv: f64 = variances.iter().flatten().sum();
            noise = ((sse + tv) / n as f64).max(1e-10);
        }
    }
    let model = AdditiveModel::from_parts(
        x,
        y,
        &kernels,
        noise,
        offset,
        comps.expect("at least one E-step"),
        opts.backfit,
    )?;
    let prediction = match x_test {
        Some(xt) => Some(model.predict(xt, false, VarianceMode::Factorized)?),
        None => None,
    };
    Ok(VbResult {
        kernels,
        noise,
        offset,
        component_means: stats.means,
        component_variances: stats.variances,
        elbo_trace: trace,
        prediction,
        model,
    })
}

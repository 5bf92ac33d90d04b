//! Additive GP classification with the Laplace approximation.
//!
//! The MAP latent function is found by Newton's method where every Newton
//! step is an additive regression on the pseudo-targets `f + W⁻¹∇` with
//! heteroscedastic noise `W⁻¹`, solved by backfitting (local scoring).

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::additive::{backfit_from, AdditiveChains, BackfitOptions, VarianceMode};
use crate::error::{invalid, GpError, Result};
use crate::kernels::{Kernel, MaternOrder};
use crate::optim::golden_section;
use crate::oracle::{logistic_loglik, sigmoid};
use crate::statespace::{predict_1d, SortedSeries};

/// Gradient and floored curvature `W = σ(f)(1 − σ(f))` of the logistic
/// log-likelihood at `f`.
pub fn logistic_derivatives(y: &[f64], f: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (g, w) = crate::oracle::logistic_derivatives(y, f);
    (g.iter().copied().collect(), w.iter().copied().collect())
}

/// `Σ_i log p(y_i | f_i)` for labels in `{0, 1}`.
pub fn log_likelihood(y: &[f64], f: &[f64]) -> f64 {
    logistic_loglik(y, f)
}

/// Stopping rules for [`newton_map`].
#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    /// Stop when `‖f⁽ᵏ⁺¹⁾ − f⁽ᵏ⁾‖∞` falls below this.
    pub tol: f64,
    pub max_newton: usize,
    pub backfit: BackfitOptions,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_newton: 50,
            backfit: BackfitOptions {
                tol: 1e-11,
                max_sweeps: 2000,
                center: false,
                strict: false,
                ..Default::default()
            },
        }
    }
}

/// Laplace approximation at the MAP of an additive latent function.
#[derive(Clone, Debug)]
pub struct LaplaceFit {
    /// MAP of `Σ_d f_d` at the training inputs.
    pub f: Vec<f64>,
    /// Per-dimension MAP components, summing to `f`.
    pub components: Vec<Vec<f64>>,
    /// Curvature of the negative log-likelihood at `f`, floored.
    pub w: Vec<f64>,
    /// `∇ log p(y | f)` at `f`, which equals `K_add⁻¹ f` at the mode.
    pub grad: Vec<f64>,
    /// `Ω` after every accepted Newton step, starting from `f = 0`.
    pub objective_trace: Vec<f64>,
    pub newton_iterations: usize,
    /// Approximate `log p(y | X, θ)`; see [`laplace_evidence`].
    pub evidence: f64,
    kernels: Vec<Kernel>,
    x: DMatrix<f64>,
    y: Vec<f64>,
    chains: AdditiveChains,
}

fn check_labels(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if y.len() != x.nrows() {
        return Err(invalid(format!(
            "{} labels for {} input rows",
            y.len(),
            x.nrows()
        )));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("class labels must be 0 or 1"));
    }
    Ok(())
}

fn sum_components(components: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n];
    for c in components {
        for (ti, ci) in t.iter_mut().zip(c) {
            *ti += ci;
        }
    }
    t
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lerp(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * (y - x)).collect()
}

/// Local-scoring Newton iteration for the MAP of
/// `Ω(f) = log p(y|f) − ½ fᵀ K_add⁻¹ f`.
///
/// Along with `f` the iteration carries `a = K_add⁻¹ f`, read off the inner
/// solve as `a = W (z − f_new)`, so `Ω` is available in O(N) for the
/// step-halving line search.
pub fn newton_map(
    x: &DMatrix<f64>,
    y: &[f64],
    kernels: &[Kernel],
    opts: &NewtonOptions,
) -> Result<LaplaceFit> {
    check_labels(x, y)?;
    let chains = AdditiveChains::new(x, kernels)?;
    let n = x.nrows();
    let d = kernels.len();
    let omega = |a: &[f64], f: &[f64]| logistic_loglik(y, f) - 0.5 * dot(a, f);
    let mut comps = vec![vec![0.0; n]; d];
    let mut f = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut trace = vec![omega(&a, &f)];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_newton {
        iterations += 1;
        let (grad, w) = logistic_derivatives(y, &f);
        let z: Vec<f64> = (0..n).map(|i| f[i] + grad[i] / w[i]).collect();
        let noise: Vec<f64> = w.iter().map(|v| 1.0 / v).collect();
        let fit = backfit_from(&chains, &z, &noise, Some(comps.clone()), &opts.backfit)?;
        let f_new = sum_components(&fit.components, n);
        let a_new: Vec<f64> = (0..n).map(|i| w[i] * (z[i] - f_new[i])).collect();
        let current = *trace.last().expect("trace starts non-empty");
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=20 {
            let f_try = lerp(&f, &f_new, scale);
            let a_try = lerp(&a, &a_new, scale);
            let o = omega(&a_try, &f_try);
            if o >= current - 1e-12 * current.abs().max(1.0) {
                accepted = Some((f_try, a_try, o));
                break;
            }
            scale *= 0.5;
        }
        let Some((f_try, a_try, o)) = accepted else {
            break;
        };
        let change = f_try
            .iter()
            .zip(&f)
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        comps = comps
            .iter()
            .zip(&fit.components)
            .map(|(c, cn)| lerp(c, cn, scale))
            .collect();
        f = f_try;
        a = a_try;
        trace.push(o);
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GpError::NewtonNotConverged {
            iterations,
            objective_trace: trace,
        });
    }
    let (grad, w) = logistic_derivatives(y, &f);
    let mut fit = LaplaceFit {
        f,
        components: comps,
        w,
        grad,
        objective_trace: trace,
        newton_iterations: iterations,
        evidence: f64::NAN,
        kernels: kernels.to_vec(),
        x: x.clone(),
        y: y.to_vec(),
        chains,
    };
    fit.evidence = laplace_evidence(&fit)?;
    Ok(fit)
}

impl LaplaceFit {
    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    pub fn labels(&self) -> &[f64] {
        &self.y
    }

    /// Pseudo-targets `f̂ + W⁻¹∇` of the last Newton step.
    pub fn pseudo_targets(&self) -> Vec<f64> {
        (0..self.f.len())
            .map(|i| self.f[i] + self.grad[i] / self.w[i])
            .collect()
    }

    /// Pseudo-target residual seen by dimension `d`.
    pub fn partial_residual(&self, d: usize) -> Vec<f64> {
        let z = self.pseudo_targets();
        (0..z.len())
            .map(|i| z[i] - (self.f[i] - self.components[d][i]))
            .collect()
    }

    /// `‖∇Ω(f̂)‖∞ = ‖∇ − a‖∞` with `a` recovered per dimension.
    pub fn gradient_norm(&self) -> f64 {
        (0..self.components.len())
            .map(|d| {
                let r = self.partial_residual(d);
                (0..r.len())
                    .map(|i| (self.grad[i] - self.w[i] * (r[i] - self.components[d][i])).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// Latent predictive mean and variance at the rows of `x_test`.
    pub fn predict_latent(
        &self,
        x_test: &DMatrix<f64>,
        mode: VarianceMode,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.kernels.len();
        if x_test.ncols() != d {
            return Err(GpError::Shape {
                dim: d,
                detail: format!("test inputs have {} columns", x_test.ncols()),
            });
        }
        let noise: Vec<f64> = self.w.iter().map(|v| 1.0 / v).collect();
        let per_dim = (0..d)
            .into_par_iter()
            .map(|j| {
                let series = SortedSeries::with_noise(
                    self.x.column(j).as_slice(),
                    &self.partial_residual(j),
                    &noise,
                )?;
                predict_1d(
                    &series,
                    &self.kernels[j].to_state_space(),
                    x_test.column(j).as_slice(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let m = x_test.nrows();
        let mut mean = vec![0.0; m];
        let mut var = vec![0.0; m];
        for (mu, v) in &per_dim {
            for i in 0..m {
                mean[i] += mu[i];
                var[i] += v[i];
            }
        }
        if mode == VarianceMode::Exact {
            var = self.exact_variance(x_test, &noise)?;
        }
        Ok((mean, var))
    }

    /// `k** − k*ᵀ (K_add + W⁻¹)⁻¹ k*` by one backfit per test row.
    fn exact_variance(&self, x_test: &DMatrix<f64>, noise: &[f64]) -> Result<Vec<f64>> {
        let n = self.x.nrows();
        let opts = BackfitOptions {
            tol: 1e-12,
            max_sweeps: 5000,
            center: false,
            strict: false,
            ..Default::default()
        };
        let prior: f64 = self.kernels.iter().map(Kernel::amplitude).sum();
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
                let total = backfit_from(&self.chains, &kstar, noise, None, &opts)?.total();
                let quad: f64 = (0..n)
                    .map(|i| kstar[i] * self.w[i] * (kstar[i] - total[i]))
                    .sum();
                Ok((prior - quad).max(0.0))
            })
            .collect()
    }
}

/// O(N) Laplace evidence with a block-diagonal curvature tiling:
///
/// `log p(y|F̂) − ½ Σ_d f̂_dᵀK_d⁻¹f̂_d − ½ Σ_d logdet(K_d + W⁻¹) − (D/2) Σ_i log W_i`.
///
/// Each `K_d⁻¹ f̂_d` is `W (r_d − f̂_d)` for the partial pseudo-residual
/// `r_d`, and each log-determinant comes from a Kalman filter on zero
/// targets with noise `W⁻¹`. For `D = 1` this is the standard Laplace
/// evidence. For `D > 1` the cross-dimension curvature is dropped.
pub fn laplace_evidence(fit: &LaplaceFit) -> Result<f64> {
    let n = fit.f.len();
    let d = fit.components.len();
    let noise: Vec<f64> = fit.w.iter().map(|v| 1.0 / v).collect();
    let zeros = vec![0.0; n];
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = logistic_loglik(&fit.y, &fit.f);
    for (j, dim) in fit.chains.dims().iter().enumerate() {
        let r = fit.partial_residual(j);
        let c = &fit.components[j];
        let quad: f64 = (0..n).map(|i| c[i] * fit.w[i] * (r[i] - c[i])).sum();
        let logdet = -2.0 * dim.log_z(&zeros, &noise)? - n as f64 * ln2pi;
        total -= 0.5 * quad + 0.5 * logdet;
    }
    total -= 0.5 * d as f64 * fit.w.iter().map(|v| v.ln()).sum::<f64>();
    if !total.is_finite() {
        return Err(GpError::IllConditioned {
            step: 0,
            detail: "Laplace evidence is not finite".into(),
        });
    }
    Ok(total)
}

/// Maximises `objective` over `x` by golden-section search along one
/// coordinate at a time within `x_j ± radius`. A coordinate move is kept
/// only when it improves the best value, so the returned trace is
/// non-decreasing. Failed evaluations count as `−∞`.
pub fn coordinate_search<F>(
    mut objective: F,
    x0: &[f64],
    sweeps: usize,
    radius: f64,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut x = x0.to_vec();
    let mut best = objective(&x)?;
    let mut trace = vec![best];
    for _ in 0..sweeps {
        let start = best;
        for j in 0..x.len() {
            let centre = x[j];
            let mut probe = x.clone();
            let (xj, neg) = golden_section(
                |v| {
                    probe[j] = v;
                    objective(&probe)
                        .ok()
                        .filter(|e| e.is_finite())
                        .map_or(f64::INFINITY, |e| -e)
                },
                centre - radius,
                centre + radius,
                tol,
                200,
            );
            if -neg > best {
                x[j] = xj;
                best = -neg;
                trace.push(best);
            }
        }
        if best - start <= 1e-9 * best.abs().max(1.0) {
            break;
        }
    }
    Ok((x, trace))
}

/// Settings for [`classify_fit`].
#[derive(Clone, Copy, Debug)]
pub struct ClassifyOptions {
    pub outer_iters: usize,
    /// Half-width of each golden-section bracket in log space.
    pub radius: f64,
    /// Bracket width at which a line search stops, in log space.
    pub tol: f64,
    pub newton: NewtonOptions,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            outer_iters: 3,
            radius: 2.0,
            tol: 0.05,
            newton: NewtonOptions::default(),
        }
    }
}

/// Kernel hyperparameters as `[log ℓ_1, log σ²_1, …, log ℓ_D, log σ²_D]`.
pub fn pack_log_hypers(kernels: &[Kernel]) -> Vec<f64> {
    kernels
        .iter()
        .flat_map(|k| [k.lengthscale().ln(), k.amplitude().ln()])
        .collect()
}

/// Inverse of [`pack_log_hypers`].
pub fn unpack_log_hypers(order: MaternOrder, theta: &[f64]) -> Result<Vec<Kernel>> {
    if !theta.len().is_multiple_of(2) {
        return Err(invalid(
            "log hyperparameters come in (lengthscale, amplitude) pairs",
        ));
    }
    theta
        .chunks(2)
        .map(|p| Kernel::new(order, p[0].exp(), p[1].exp()))
        .collect()
}

/// Result of [`classify_fit`].
#[derive(Clone, Debug)]
pub struct ClassifyResult {
    pub kernels: Vec<Kernel>,
    pub fit: LaplaceFit,
    /// Best evidence after every accepted coordinate move.
    pub evidence_trace: Vec<f64>,
}

/// Learns kernel hyperparameters by maximising [`laplace_evidence`] with
/// [`coordinate_search`] on log θ, then refits the MAP at the optimum.
pub fn classify_fit(
    x: &DMatrix<f64>,
    y: &[f64],
    initial: &[Kernel],
    opts: &ClassifyOptions,
) -> Result<ClassifyResult> {
    check_labels(x, y)?;
    let order = initial
        .first()
        .ok_or_else(|| invalid("no kernels given"))?
        .order();
    let objective = |theta: &[f64]| {
        newton_map(x, y, &unpack_log_hypers(order, theta)?, &opts.newton).map(|f| f.evidence)
    };
    let (theta, trace) = coordinate_search(
        objective,
        &pack_log_hypers(initial),
        opts.outer_iters,
        opts.radius,
        opts.tol,
    )?;
    let kernels = unpack_log_hypers(order, &theta)?;
    let fit = newton_map(x, y, &kernels, &opts.newton)?;
    Ok(ClassifyResult {
        kernels,
        fit,
        evidence_trace: trace,
    })
}

fn hermite_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(32))
}

/// Nodes and weights of the `n`-point Gauss-Hermite rule for the weight
/// `e^{−x²}`, by the Golub-Welsch eigenvalue method.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i.abs_diff(j) == 1 {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            (
                eig.eigenvalues[k],
                std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, k)].powi(2),
            )
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `∫ σ(f) N(f; mean, var) df` by 32-point Gauss-Hermite quadrature.
pub fn logistic_gaussian_integral(mean: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return sigmoid(mean);
    }
    let (nodes, weights) = hermite_rule();
    let s = (2.0 * var).sqrt();
    let p: f64 = nodes
        .iter()
        .zip(weights)
        .map(|(x, w)| w * sigmoid(mean + s * x))
        .sum::<f64>()
        / std::f64::consts::PI.sqrt();
    p.clamp(0.0, 1.0)
}

/// Class-1 probabilities at the rows of `x_test`.
pub fn classify_predict(
    fit: &LaplaceFit,
    x_test: &DMatrix<f64>,
    mode: VarianceMode,
) -> Result<Vec<f64>> {
    let (mean, var) = fit.predict_latent(x_test, mode)?;
    Ok(mean
        .iter()
        .zip(&var)
        .map(|(&m, &v)| logistic_gaussian_integral(m, v))
        .collect())
}

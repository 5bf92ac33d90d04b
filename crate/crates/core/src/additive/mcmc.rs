//! Gibbs sampling for the additive model with hyperparameter priors.
//!
//! Each sweep visits the dimensions in order. For dimension `d` it draws
//! `θ_d` by slice sampling from `p(θ_d | r_d)` with the chain integrated out
//! by the Kalman filter, then draws the whole chain by forward-filtering
//! backward-sampling. The noise precision is drawn from its conjugate Gamma
//! conditional. Test inputs ride along in every chain as observations with
//! infinite noise, so each sweep also yields a joint draw at the test points.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{invalid, GpError, Result};
use crate::kernels::{Hyperparameters, Kernel, MaternOrder};
use crate::optim::slice_sample;
use crate::statespace::{sort_permutation, Chain};

/// Priors over the hyperparameters of every dimension and the noise.
///
/// `log ℓ_d ~ N(μ_l, v_l)`, `1/σ_{f,d}² ~ Γ(α_τ, β_τ)` and
/// `1/σ_n² ~ Γ(α_n, β_n)`, with Gammas in shape/rate form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperPrior {
    pub mu_l: f64,
    pub v_l: f64,
    pub alpha_tau: f64,
    pub beta_tau: f64,
    pub alpha_n: f64,
    pub beta_n: f64,
}

impl Default for HyperPrior {
    fn default() -> Self {
        Self {
            mu_l: 0.0,
            v_l: 1.0,
            alpha_tau: 2.0,
            beta_tau: 1.0,
            alpha_n: 2.0,
            beta_n: 0.1,
        }
    }
}

impl HyperPrior {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mu_l.is_finite()
            && [
                self.v_l,
                self.alpha_tau,
                self.beta_tau,
                self.alpha_n,
                self.beta_n,
            ]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(invalid(
                "prior variances, shapes and rates must be positive and finite",
            ))
        }
    }

    fn log_lengthscale_density(&self, log_l: f64) -> f64 {
        -0.5 * (log_l - self.mu_l).powi(2) / self.v_l
    }

    /// Density of `u = log σ_f²` when `e^{−u} ~ Γ(α_τ, β_τ)`.
    fn log_amplitude_density(&self, u: f64) -> f64 {
        -self.alpha_tau * u - self.beta_tau * (-u).exp()
    }
}

#[derive(Clone, Debug)]
pub struct McmcOptions {
    pub n_samples: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Keep the hyperparameters at their initial values.
    pub fixed_hypers: bool,
    /// Burn-in sweeps that draw only the latent functions before the
    /// hyperparameters start moving.
    pub hyper_warmup: usize,
    /// Initial step width of the slice sampler in log space.
    pub slice_width: f64,
    /// Abort when any sampled function value exceeds this in magnitude.
    pub divergence_guard: f64,
    pub order: MaternOrder,
    /// Record `Σ_d f_d` at the training inputs for every kept sample.
    pub store_latents: bool,
}

impl Default for McmcOptions {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            burn_in: 200,
            seed: 0,
            fixed_hypers: false,
            hyper_warmup: 20,
            slice_width: 1.0,
            divergence_guard: 1e8,
            order: MaternOrder::SevenHalves,
            store_latents: false,
        }
    }
}

/// Kept samples of one run.
#[derive(Clone, Debug)]
pub struct McmcTrace {
    /// `lengthscales[s][d]`
    pub lengthscales: Vec<Vec<f64>>,
    /// `amplitudes[s][d]`
    pub amplitudes: Vec<Vec<f64>>,
    pub noise: Vec<f64>,
    /// `Σ_d f_d` at the training inputs, when requested.
    pub latents: Vec<Vec<f64>>,
    /// Mean number of target-density evaluations per slice update.
    pub evaluations_per_update: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct McmcResult {
    pub trace: McmcTrace,
    /// Mean of the sampled latent function at the test inputs.
    pub mean: Vec<f64>,
    /// Variance of the sampled latent function at the test inputs.
    pub variance: Vec<f64>,
    /// Batch-means Monte-Carlo standard error of `mean`.
    pub mc_standard_error: Vec<f64>,
    pub offset: f64,
}

#[derive(Clone, Copy)]
enum Slot {
    Train(usize),
    Test(usize),
}

struct AugDim {
    sorted_x: Vec<f64>,
    slots: Vec<Slot>,
}

impl AugDim {
    fn new(train: &[f64], test: &[f64]) -> Self {
        let all: Vec<f64> = train.iter().chain(test).copied().collect();
        let perm = sort_permutation(&all);
        let n = train.len();
        Self {
            sorted_x: perm.iter().map(|&i| all[i]).collect(),
            slots: perm
                .iter()
                .map(|&i| {
                    if i < n {
                        Slot::Train(i)
                    } else {
                        Slot::Test(i - n)
                    }
                })
                .collect(),
        }
    }

    fn targets(&self, r: &[f64], noise: f64) -> (Vec<f64>, Vec<f64>) {
        self.slots
            .iter()
            .map(|s| match *s {
                Slot::Train(i) => (r[i], noise),
                Slot::Test(_) => (0.0, f64::INFINITY),
            })
            .unzip()
    }
}

/// Runs the sampler. `init` defaults to unit lengthscales, `σ_f² = var(y)/D`
/// and `σ_n² = var(y)/10`.
pub fn mcmc_fit(
    x: &DMatrix<f64>,
    y: &[f64],
    prior: &HyperPrior,
    init: Option<(&[Kernel], f64)>,
    x_test: Option<&DMatrix<f64>>,
    opts: &McmcOptions,
) -> Result<McmcResult> {
    prior.validate()?;
    let (n, d) = x.shape();
    if y.len() != n {
        return Err(invalid(format!("expected {n} targets, got {}", y.len())));
    }
    if d == 0 {
        return Err(invalid("need at least one input dimension"));
    }
    let empty = DMatrix::zeros(0, d);
    let x_test = x_test.unwrap_or(&empty);
    if x_test.ncols() != d {
        return Err(GpError::Shape {
            dim: d,
            detail: "test inputs have a different width".into(),
        });
    }
    let m = x_test.nrows();
    let offset = if n > 0 {
        y.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    let yc: Vec<f64> = y.iter().map(|v| v - offset).collect();
    let var_y = if n > 1 {
        yc.iter().map(|v| v * v).sum::<f64>() / n as f64
    } else {
        1.0
    }
    .max(1e-6);

    let (mut kernels, mut noise) = match init {
        Some((k, s)) => {
            if k.len() != d {
                return Err(GpError::Shape {
                    dim: d,
                    detail: format!("{} initial kernels", k.len()),
                });
            }
            (k.to_vec(), s)
        }
        None => (
            (0..d)
                .map(|_| Kernel::new(opts.order, 1.0, var_y / d as f64))
                .collect::<Result<Vec<_>>>()?,
            0.1 * var_y,
        ),
    };
    let aug: Vec<AugDim> = (0..d)
        .map(|j| AugDim::new(x.column(j).as_slice(), x_test.column(j).as_slice()))
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut f_train = vec![vec![0.0; n]; d];
    let mut f_test = vec![vec![0.0; m]; d];
    let mut trace = McmcTrace {
        lengthscales: vec![],
        amplitudes: vec![],
        noise: vec![],
        latents: vec![],
        evaluations_per_update: 0.0,
        seed: opts.seed,
    };
    let mut draws_test: Vec<Vec<f64>> = Vec::with_capacity(opts.n_samples);
    let (mut evals, mut updates) = (0usize, 0usize);

    let warmup = opts.hyper_warmup.min(opts.burn_in);
    for iter in 0..opts.burn_in + opts.n_samples {
        let move_hypers = !opts.fixed_hypers && iter >= warmup;
        for j in 0..d {
            let r: Vec<f64> = (0..n)
                .map(|i| {
                    yc[i]
                        - (0..d)
                            .filter(|&k| k != j)
                            .map(|k| f_train[k][i])
                            .sum::<f64>()
                })
                .collect();
            let (ys, rs) = aug[j].targets(&r, noise);
            if move_hypers {
                let order = kernels[j].order();
                let log_z = |hp: Hyperparameters, evals: &mut usize| -> f64 {
                    *evals += 1;
                    if n == 0 {
                        return 0.0;
                    }
                    let ssm = Kernel::from_hypers(order, hp).to_state_space();
                    Chain::new(&ssm, &aug[j].sorted_x)
                        .and_then(|c| c.filter(&ys, &rs))
                        .map_or(f64::NEG_INFINITY, |p| p.log_z)
                };
                let hp = kernels[j].hypers();
                let la = hp.log_amplitude();
                let ll = slice_sample(
                    |v| match Hyperparameters::from_log(v, la) {
                        Ok(h) => prior.log_lengthscale_density(v) + log_z(h, &mut evals),
                        Err(_) => f64::NEG_INFINITY,
                    },
                    hp.log_lengthscale(),
                    opts.slice_width,
                    20,
                    &mut rng,
                );
                let la = slice_sample(
                    |v| match Hyperparameters::from_log(ll, v) {
                        Ok(h) => prior.log_amplitude_density(v) + log_z(h, &mut evals),
                        Err(_) => f64::NEG_INFINITY,
                    },
                    la,
                    opts.slice_width,
                    20,
                    &mut rng,
                );
                updates += 2;
                kernels[j] = kernels[j].with_log_hypers(ll, la)?;
            }
            if n + m == 0 {
                continue;
            }
            let chain = Chain::new(&kernels[j].to_state_space(), &aug[j].sorted_x)?;
            let pass = chain.filter(&ys, &rs)?;
            let z = chain.sample(&pass, &mut rng)?;
            for (k, slot) in aug[j].slots.iter().enumerate() {
                let v = z[k][0];
                if !v.is_finite() || v.abs() > opts.divergence_guard {
                    return Err(GpError::Divergent(format!(
                        "|f| = {v:e} in dimension {j} at sweep {iter}"
                    )));
                }
                match *slot {
                    Slot::Train(i) => f_train[j][i] = v,
                    Slot::Test(i) => f_test[j][i] = v,
                }
            }
        }
        if move_hypers {
            let resid: Vec<f64> = (0..n)
                .map(|i| yc[i] - (0..d).map(|k| f_train[k][i]).sum::<f64>())
                .collect();
            noise = 1.0 / sample_noise_precision(prior, &resid, &mut rng)?;
        }
        if iter >= opts.burn_in {
            trace
                .lengthscales
                .push(kernels.iter().map(Kernel::lengthscale).collect());
            trace
                .amplitudes
                .push(kernels.iter().map(Kernel::amplitude).collect());
            trace.noise.push(noise);
            if opts.store_latents {
                trace.latents.push(
                    (0..n)
                        .map(|i| (0..d).map(|k| f_train[k][i]).sum())
                        .collect(),
                );
            }
            draws_test.push((0..m).map(|i| (0..d).map(|k| f_test[k][i]).sum()).collect());
        }
    }
    trace.evaluations_per_update = if updates > 0 {
        evals as f64 / updates as f64
    } else {
        0.0
    };

    let s = draws_test.len().max(1) as f64;
    let mut mean = vec![0.0; m];
    let mut variance = vec![0.0; m];
    for draw in &draws_test {
        for i in 0..m {
            mean[i] += draw[i] / s;
        }
    }
    for draw in &draws_test {
        for i in 0..m {
            variance[i] += (draw[i] - mean[i]).powi(2) / s;
        }
    }
    let mc_standard_error = (0..m)
        .map(|i| batch_means_se(draws_test.iter().map(|d| d[i])))
        .collect();
    for v in &mut mean {
        *v += offset;
    }
    Ok(McmcResult {
        trace,
        mean,
        variance,
        mc_standard_error,
        offset,
    })
}

/// Draws `τ_n ~ Γ(α_n + N/2, β_n + ½ Σ_i r_i²)` given residuals `r = y − Σ_d f_d`.
pub fn sample_noise_precision<R: rand::Rng + ?Sized>(
    prior: &HyperPrior,
    residuals: &[f64],
    rng: &mut R,
) -> Result<f64> {
    let sse: f64 = residuals.iter().map(|v| v * v).sum();
    let shape = prior.alpha_n + 0.5 * residuals.len() as f64;
    let rate = prior.beta_n + 0.5 * sse;
    Ok(Gamma::new(shape, 1.0 / rate)
        .map_err(|e| invalid(e.to_string()))?
        .sample(rng))
}

/// Standard error of a chain mean by non-overlapping batch means with
/// `⌊√S⌋` batches.
pub fn batch_means_se(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let s = v.len();
    if s < 4 {
        return f64::NAN;
    }
    let batches = (s as f64).sqrt().floor() as usize;
    let size = s / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| v[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
    (var / batches as f64).sqrt()
}

//! The method registry: training, persistence and prediction for every
//! named method.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use structgp::additive::{
    heuristic_init, mcmc_fit, vbem_fit, AdditiveModel, BackfitOptions, HyperPrior, McmcOptions,
    VarianceMode, VbOptions,
};
use structgp::bench::timed;
use structgp::classify::{
    classify_predict, coordinate_search, logistic_gaussian_integral, newton_map, pack_log_hypers,
    unpack_log_hypers, NewtonOptions,
};
use structgp::gridgp::{grid_fit, grid_solve, GridHypers, GridSpec};
use structgp::io::Standardizer;
use structgp::optim::nelder_mead;
use structgp::oracle::{full_gp, full_gp_laplace, DenseKernel, DEFAULT_CAP};
use structgp::ppgpr::{ppgpr_greedy, PpgprOptions};
use structgp::{Kernel, MaternOrder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    FullGp,
    AdditiveBackfit,
    AdditiveVb,
    AdditiveMcmc,
    PpgprGreedy,
    AdditiveLa,
    GpGrid,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::FullGp,
        Method::AdditiveBackfit,
        Method::AdditiveVb,
        Method::AdditiveMcmc,
        Method::PpgprGreedy,
        Method::AdditiveLa,
        Method::GpGrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FullGp => "full-gp",
            Method::AdditiveBackfit => "additive-backfit",
            Method::AdditiveVb => "additive-vb",
            Method::AdditiveMcmc => "additive-mcmc",
            Method::PpgprGreedy => "ppgpr-greedy",
            Method::AdditiveLa => "additive-la",
            Method::GpGrid => "gp-grid",
        }
    }

    pub fn is_classifier(self) -> bool {
        self == Method::AdditiveLa
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| anyhow!("unknown method {s:?}; expected one of {}", names()))
    }
}

fn names() -> String {
    Method::ALL
        .iter()
        .map(|m| m.name())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Parses `matern72`, `7/2` or `3.5` style kernel orders.
pub fn parse_order(s: &str) -> Result<MaternOrder> {
    let t = s.trim();
    let nu = match t {
        "1/2" => Some(0.5),
        "3/2" => Some(1.5),
        "5/2" => Some(2.5),
        "7/2" => Some(3.5),
        _ => t.parse::<f64>().ok(),
    };
    match nu {
        Some(v) => Ok(MaternOrder::from_nu(v)?),
        None => Ok(t.parse::<MaternOrder>()?),
    }
}

/// Training knobs shared by all methods.
#[derive(Clone, Debug)]
pub struct Settings {
    pub order: MaternOrder,
    /// Objective evaluations (full-gp, gp-grid), VB outer iterations, or
    /// coordinate-search sweeps (classification).
    pub budget: usize,
    pub seed: u64,
    pub max_projections: usize,
    pub samples: usize,
    pub burn_in: usize,
    pub lengthscale: Option<f64>,
    pub amplitude: Option<f64>,
    pub noise: Option<f64>,
    pub exact_variance: bool,
    pub ard: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            order: MaternOrder::SevenHalves,
            budget: 200,
            seed: 0,
            max_projections: 10,
            samples: 1000,
            burn_in: 200,
            lengthscale: None,
            amplitude: None,
            noise: None,
            exact_variance: false,
            ard: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscale: f64,
    pub amplitude: f64,
}

impl KernelParams {
    fn of(k: &Kernel) -> Self {
        Self {
            lengthscale: k.lengthscale(),
            amplitude: k.amplitude(),
        }
    }
}

/// A trained regression model as written by `train`. Models keep their
/// training data; prediction re-solves with the stored hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub method: String,
    pub version: String,
    pub dataset: String,
    pub seed: u64,
    pub order: String,
    pub kernels: Vec<KernelParams>,
    pub noise: f64,
    pub offset: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projections: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardizer: Option<Standardizer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcmc: Option<McmcSettings>,
    pub exact_variance: bool,
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct McmcSettings {
    pub samples: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl ModelFile {
    pub fn method(&self) -> Result<Method> {
        self.method.parse()
    }

    pub fn order(&self) -> Result<MaternOrder> {
        Ok(self.order.parse::<MaternOrder>()?)
    }

    pub fn kernels(&self) -> Result<Vec<Kernel>> {
        let order = self.order()?;
        self.kernels
            .iter()
            .map(|k| Ok(Kernel::new(order, k.lengthscale, k.amplitude)?))
            .collect()
    }

    pub fn train_matrix(&self) -> DMatrix<f64> {
        let d = self.train_x.first().map_or(0, Vec::len);
        DMatrix::from_fn(self.train_x.len(), d, |i, j| self.train_x[i][j])
    }
}

fn variance(y: &[f64]) -> f64 {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64).max(1e-12)
}

fn column_range(x: &DMatrix<f64>, j: usize) -> f64 {
    let c = x.column(j);
    (c.max() - c.min()).max(1e-12)
}

fn dense_product_kernels(order: MaternOrder, theta: &[f64]) -> Result<Vec<Kernel>> {
    let d = theta.len() - 2;
    (0..d)
        .map(|j| {
            Ok(Kernel::new(
                order,
                theta[j].exp(),
                if j == 0 { theta[d].exp() } else { 1.0 },
            )?)
        })
        .collect()
}

fn additive_backfit_options() -> BackfitOptions {
    BackfitOptions {
        max_sweeps: 500,
        ..Default::default()
    }
}

fn ppgpr_refit_options() -> BackfitOptions {
    BackfitOptions {
        tol: 1e-6,
        max_sweeps: 500,
        strict: false,
        ..Default::default()
    }
}

/// Trains a regression method on `(x, y)`.
pub fn train(
    method: Method,
    x: &DMatrix<f64>,
    y: &[f64],
    dataset: &str,
    s: &Settings,
) -> Result<ModelFile> {
    ensure!(
        !method.is_classifier(),
        "{method} is a classifier; use the classify command"
    );
    let (n, d) = x.shape();
    ensure!(
        n >= 2 && y.len() == n,
        "need at least two rows with targets"
    );
    let var_y = variance(y);
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let mut model = ModelFile {
        method: method.name().into(),
        version: crate::VERSION.into(),
        dataset: dataset.into(),
        seed: s.seed,
        order: s.order.name().into(),
        kernels: vec![],
        noise: 0.0,
        offset: mean_y,
        projections: None,
        standardizer: None,
        mcmc: None,
        exact_variance: s.exact_variance,
        train_x: (0..n).map(|i| x.row(i).iter().copied().collect()).collect(),
        train_y: y.to_vec(),
    };
    let user_kernels = |default: &[Kernel]| -> Result<Vec<Kernel>> {
        default
            .iter()
            .map(|k| {
                Ok(Kernel::new(
                    s.order,
                    s.lengthscale.unwrap_or(k.lengthscale()),
                    s.amplitude.unwrap_or(k.amplitude()),
                )?)
            })
            .collect()
    };
    match method {
        Method::FullGp => {
            ensure!(
                n <= DEFAULT_CAP,
                "full-gp is limited to {DEFAULT_CAP} training points, got {n}"
            );
            let yc: Vec<f64> = y.iter().map(|v| v - mean_y).collect();
            let probe = x.rows(0, 1).into_owned();
            let mut theta: Vec<f64> = (0..d)
                .map(|j| s.lengthscale.unwrap_or_else(|| column_range(x, j)).ln())
                .collect();
            theta.push(s.amplitude.unwrap_or(var_y).ln());
            theta.push(s.noise.unwrap_or(0.1 * var_y).ln());
            let order = s.order;
            let objective = |t: &[f64]| {
                if t.iter().any(|v| v.abs() > 30.0) {
                    return f64::INFINITY;
                }
                dense_product_kernels(order, t)
                    .ok()
                    .and_then(|ks| {
                        full_gp(x, &yc, &probe, DenseKernel::Product(&ks), t[d + 1].exp()).ok()
                    })
                    .map_or(f64::INFINITY, |r| -r.log_z)
            };
            let best = nelder_mead(objective, &theta, 0.5, s.budget.max(1), 1e-10);
            let ks = dense_product_kernels(order, &best.x)?;
            model.kernels = ks.iter().map(KernelParams::of).collect();
            model.noise = best.x[d + 1].exp();
        }
        Method::AdditiveBackfit => {
            let (ks, noise) = heuristic_init(x, y, s.order)?;
            let ks = user_kernels(&ks)?;
            let noise = s.noise.unwrap_or(noise);
            let fit = AdditiveModel::fit(x, y, &ks, noise, &additive_backfit_options())?;
            model.kernels = fit.kernels().iter().map(KernelParams::of).collect();
            model.noise = noise;
        }
        Method::AdditiveVb => {
            let (ks, noise) = heuristic_init(x, y, s.order)?;
            let ks = user_kernels(&ks)?;
            let opts = VbOptions {
                outer_iters: s.budget.clamp(1, 50),
                ..Default::default()
            };
            let fit = vbem_fit(x, y, Some((&ks, s.noise.unwrap_or(noise))), None, &opts)?;
            model.kernels = fit.kernels.iter().map(KernelParams::of).collect();
            model.noise = fit.noise;
        }
        Method::AdditiveMcmc => {
            let opts = McmcOptions {
                n_samples: s.samples,
                burn_in: s.burn_in,
                seed: s.seed,
                order: s.order,
                ..Default::default()
            };
            let res = mcmc_fit(x, y, &HyperPrior::default(), None, None, &opts)?;
            let t = &res.trace;
            let k = t.noise.len().max(1) as f64;
            model.kernels = (0..d)
                .map(|j| KernelParams {
                    lengthscale: t.lengthscales.iter().map(|l| l[j]).sum::<f64>() / k,
                    amplitude: t.amplitudes.iter().map(|a| a[j]).sum::<f64>() / k,
                })
                .collect();
            model.noise = t.noise.iter().sum::<f64>() / k;
            model.mcmc = Some(McmcSettings {
                samples: s.samples,
                burn_in: s.burn_in,
                seed: s.seed,
            });
        }
        Method::PpgprGreedy => {
            let opts = PpgprOptions {
                max_projections: s.max_projections,
                order: s.order,
                ..Default::default()
            };
            let fit = ppgpr_greedy(x, y, &opts)?;
            let w = fit.projections();
            model.projections = Some(
                (0..w.ncols())
                    .map(|j| w.column(j).iter().copied().collect())
                    .collect(),
            );
            model.standardizer = Some(fit.standardizer().clone());
            model.kernels = fit.kernels().iter().map(KernelParams::of).collect();
            model.noise = fit.noise();
            model.offset = fit.offset();
        }
        Method::GpGrid => {
            let (spec, values) = grid_from_rows(x, y)?;
            let init = GridHypers {
                order: s.order,
                lengthscales: if s.ard {
                    (0..d)
                        .map(|j| s.lengthscale.unwrap_or_else(|| column_range(x, j) / 4.0))
                        .collect()
                } else {
                    vec![s.lengthscale.unwrap_or_else(|| {
                        (0..d).map(|j| column_range(x, j)).sum::<f64>() / (4 * d) as f64
                    })]
                },
                amplitude: s.amplitude.unwrap_or(var_y),
                noise: s.noise.unwrap_or(0.1 * var_y),
            };
            let (fit, h) = grid_fit(&spec, &values, &init, s.budget.max(1))?;
            model.kernels = h.kernels(d)?.iter().map(KernelParams::of).collect();
            model.noise = h.noise;
            model.offset = fit.offset();
        }
        Method::AdditiveLa => unreachable!("rejected above"),
    }
    Ok(model)
}

/// Predictive mean and variance of `y*` (noise included).
pub fn predict(model: &ModelFile, x_test: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let method = model.method()?;
    let x = model.train_matrix();
    let y = &model.train_y;
    ensure!(
        x_test.ncols() == x.ncols(),
        "test data has {} input columns, model expects {}",
        x_test.ncols(),
        x.ncols()
    );
    let ks = model.kernels()?;
    let noise = model.noise;
    let (mean, var) = match method {
        Method::FullGp => {
            let yc: Vec<f64> = y.iter().map(|v| v - model.offset).collect();
            let r = full_gp(&x, &yc, x_test, DenseKernel::Product(&ks), noise)?;
            (
                r.mean.iter().map(|m| m + model.offset).collect(),
                r.cov
                    .diagonal()
                    .iter()
                    .map(|v| v.max(0.0) + noise)
                    .collect(),
            )
        }
        Method::AdditiveBackfit | Method::AdditiveVb => {
            let fit = AdditiveModel::fit(&x, y, &ks, noise, &additive_backfit_options())?;
            let mode = if model.exact_variance {
                VarianceMode::Exact
            } else {
                VarianceMode::Factorized
            };
            fit.predict(x_test, true, mode)?
        }
        Method::AdditiveMcmc => {
            let m = model
                .mcmc
                .ok_or_else(|| anyhow!("model file lacks sampler settings"))?;
            let opts = McmcOptions {
                n_samples: m.samples,
                burn_in: m.burn_in,
                seed: m.seed,
                order: model.order()?,
                ..Default::default()
            };
            let res = mcmc_fit(&x, y, &HyperPrior::default(), None, Some(x_test), &opts)?;
            let mean_noise =
                res.trace.noise.iter().sum::<f64>() / res.trace.noise.len().max(1) as f64;
            (
                res.mean,
                res.variance.iter().map(|v| v + mean_noise).collect(),
            )
        }
        Method::PpgprGreedy => {
            let st = model
                .standardizer
                .as_ref()
                .ok_or_else(|| anyhow!("model file lacks the standardizer"))?;
            let p = model
                .projections
                .as_ref()
                .ok_or_else(|| anyhow!("model file lacks projections"))?;
            let w = DMatrix::from_fn(x.ncols(), p.len(), |i, j| p[j][i]);
            let features = st.apply(&x)? * &w;
            let fit = AdditiveModel::fit(&features, y, &ks, noise, &ppgpr_refit_options())?;
            fit.predict(&(st.apply(x_test)? * &w), true, VarianceMode::Factorized)?
        }
        Method::GpGrid => {
            let (spec, values) = grid_from_rows(&x, y)?;
            let yc: Vec<f64> = values.iter().map(|v| v - model.offset).collect();
            let fit = grid_solve(&spec, &ks, noise, &yc)?;
            let (m, v) = fit.predict(x_test, true)?;
            let v = v.expect("variance requested");
            (
                m.iter().map(|m| m + model.offset).collect(),
                v.iter().map(|v| v + noise).collect(),
            )
        }
        Method::AdditiveLa => bail!("additive-la models are produced by the classify command"),
    };
    Ok((mean, var))
}

/// Reads the rows of `x` as a complete tensor grid: the axes are the sorted
/// distinct values of each column and every grid point must appear once.
pub fn grid_from_rows(x: &DMatrix<f64>, y: &[f64]) -> Result<(GridSpec, Vec<f64>)> {
    let (n, d) = x.shape();
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut a: Vec<f64> = x.column(j).iter().copied().collect();
            a.sort_by(f64::total_cmp);
            a.dedup();
            a
        })
        .collect();
    let size: usize = axes.iter().map(Vec::len).product();
    ensure!(
        size == n,
        "inputs are not a complete grid: {n} rows but {size} grid points"
    );
    let spec = GridSpec::new(axes.clone())?;
    let mut values = vec![f64::NAN; n];
    for i in 0..n {
        let mut idx = 0;
        for (j, a) in axes.iter().enumerate() {
            let k = a
                .binary_search_by(|v| v.total_cmp(&x[(i, j)]))
                .map_err(|_| anyhow!("row {i} is off the grid"))?;
            idx = idx * a.len() + k;
        }
        ensure!(values[idx].is_nan(), "grid point of row {i} appears twice");
        values[idx] = y[i];
    }
    Ok((spec, values))
}

/// Output of the `classify` command.
#[derive(Clone, Debug)]
pub struct ClassifierOutput {
    pub kernels: Vec<Kernel>,
    pub evidence: f64,
    pub evidence_trace: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub train_secs: f64,
    pub predict_secs: f64,
}

/// Learns θ by coordinate search on the Laplace evidence and predicts
/// class-1 probabilities. `full-gp` runs the same search on the dense
/// Laplace evidence.
pub fn classify(
    method: Method,
    x: &DMatrix<f64>,
    y: &[f64],
    x_test: &DMatrix<f64>,
    s: &Settings,
) -> Result<ClassifierOutput> {
    let d = x.ncols();
    let init: Vec<Kernel> = (0..d)
        .map(|j| {
            Kernel::new(
                s.order,
                s.lengthscale.unwrap_or_else(|| column_range(x, j) / 2.0),
                s.amplitude.unwrap_or(1.0),
            )
        })
        .collect::<structgp::Result<_>>()?;
    let order = s.order;
    let newton = NewtonOptions::default();
    let sweeps = s.budget.clamp(1, 20);
    let out: Result<ClassifierOutput> = match method {
        Method::AdditiveLa => {
            let start = Instant::now();
            let objective = |t: &[f64]| {
                newton_map(x, y, &unpack_log_hypers(order, t)?, &newton).map(|f| f.evidence)
            };
            let (theta, trace) =
                coordinate_search(objective, &pack_log_hypers(&init), sweeps, 2.0, 0.05)?;
            let kernels = unpack_log_hypers(order, &theta)?;
            let fit = newton_map(x, y, &kernels, &newton)?;
            let train_secs = start.elapsed().as_secs_f64();
            let mode = if s.exact_variance {
                VarianceMode::Exact
            } else {
                VarianceMode::Factorized
            };
            let (probabilities, predict_secs) = timed(|| classify_predict(&fit, x_test, mode));
            let probabilities: Vec<f64> = probabilities?;
            Ok(ClassifierOutput {
                kernels,
                evidence: fit.evidence,
                evidence_trace: trace,
                probabilities,
                train_secs,
                predict_secs,
            })
        }
        Method::FullGp => {
            ensure!(
                x.nrows() <= DEFAULT_CAP,
                "full-gp is limited to {DEFAULT_CAP} training points"
            );
            let start = Instant::now();
            let objective = |t: &[f64]| {
                full_gp_laplace(x, y, &unpack_log_hypers(order, t)?, 1e-8, 100)
                    .map(|f| f.log_evidence)
            };
            let (theta, trace) =
                coordinate_search(objective, &pack_log_hypers(&init), sweeps, 2.0, 0.05)?;
            let kernels = unpack_log_hypers(order, &theta)?;
            let fit = full_gp_laplace(x, y, &kernels, 1e-8, 100)?;
            let train_secs = start.elapsed().as_secs_f64();
            let (latent, predict_secs) = timed(|| fit.predict_latent(x_test, &kernels));
            let (m, v) = latent?;
            let probabilities = m
                .iter()
                .zip(&v)
                .map(|(&m, &v)| logistic_gaussian_integral(m, v))
                .collect();
            Ok(ClassifierOutput {
                kernels,
                evidence: fit.log_evidence,
                evidence_trace: trace,
                probabilities,
                train_secs,
                predict_secs,
            })
        }
        other => bail!("{other} is not a classifier; use additive-la or full-gp"),
    };
    out.context("classification failed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_round_trips() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("svm".parse::<Method>().is_err());
        assert_eq!(parse_order("5/2").unwrap(), MaternOrder::FiveHalves);
        assert_eq!(parse_order("matern12").unwrap(), MaternOrder::Half);
        assert_eq!(parse_order("3.5").unwrap(), MaternOrder::SevenHalves);
    }

    #[test]
    fn grid_detection() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let (spec, v) = grid_from_rows(&x, &[10.0, 1.0, 0.0, 11.0]).unwrap();
        assert_eq!(spec.shape(), vec![2, 2]);
        assert_eq!(v, vec![0.0, 1.0, 10.0, 11.0]);
        assert!(grid_from_rows(&x.rows(0, 3).into_owned(), &[0.0; 3]).is_err());
    }
}

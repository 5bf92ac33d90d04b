use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::Args;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};
use structgp::bench::{
    gnuplot_script, loglog_slope, pareto_by_size, sweep, timed, write_cells_csv, BenchCell,
    Measurement,
};
use structgp::gridgp::{grid_fit, GridHypers, GridSpec};
use structgp::io::{
    gen_additive, gen_classification, gen_product, load_csv, load_image, sample_gp, save_image,
    split, write_csv, Dataset, GridData, TargetColumn,
};
use structgp::metrics::{classification_metrics, regression_metrics};
use structgp::{Kernel, MaternOrder};

use crate::config::Config;
use crate::methods::{self, parse_order, Method, ModelFile, Settings};
use crate::{DataLayout, VERSION};

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `<path>.timing.json`, where wall-clock measurements go so that the main
/// outputs stay byte-identical across runs.
fn timing_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".timing.json");
    PathBuf::from(s)
}

fn json_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn load(path: &Path, layout: &DataLayout, cfg: &Config) -> Result<Dataset> {
    let target: String = cfg.pick(layout.target.clone(), "target", "last".into())?;
    let target: TargetColumn = target.parse()?;
    let no_header = layout.no_header || cfg.get::<bool>("no_header")?.unwrap_or(false);
    load_csv(path, &target, !no_header).with_context(|| format!("loading {}", path.display()))
}

fn write_columns(path: &Path, header: &[&str], columns: &[&[f64]]) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(out, "{}", header.join(","))?;
    let n = columns.first().map_or(0, |c| c.len());
    for i in 0..n {
        let row: Vec<String> = columns.iter().map(|c| format!("{}", c[i])).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn kernels_json(ks: &[Kernel]) -> Value {
    Value::Array(
        ks.iter()
            .map(|k| json!({"lengthscale": k.lengthscale(), "amplitude": k.amplitude()}))
            .collect(),
    )
}

/// Model-tuning flags shared by `train`, `classify` and `benchmark`.
#[derive(Args, Debug, Clone, Default)]
pub struct TuningArgs {
    /// Kernel as `matern72(lengthscale=1.0, amplitude=1.0)`; sets the order
    /// and initial hyperparameters unless the individual flags are given.
    #[arg(long)]
    kernel: Option<String>,
    /// Matérn order: 1/2, 3/2, 5/2 or 7/2 (also matern72 or 3.5).
    #[arg(long)]
    order: Option<String>,
    /// Optimizer budget: objective evaluations (full-gp, gp-grid), VB outer
    /// iterations (additive-vb) or coordinate-search sweeps (classify).
    #[arg(long)]
    budget: Option<usize>,
    /// Seed of every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum number of projections for ppgpr-greedy.
    #[arg(long)]
    max_projections: Option<usize>,
    /// Kept MCMC samples for additive-mcmc.
    #[arg(long)]
    samples: Option<usize>,
    /// MCMC burn-in sweeps.
    #[arg(long)]
    burn_in: Option<usize>,
    /// Initial (or fixed, for additive-backfit) kernel lengthscale.
    #[arg(long)]
    lengthscale: Option<f64>,
    /// Initial (or fixed) kernel amplitude σ_f².
    #[arg(long)]
    amplitude: Option<f64>,
    /// Initial (or fixed) noise variance σ_n².
    #[arg(long)]
    noise: Option<f64>,
    /// Exact additive predictive variances (one backfit per test point).
    #[arg(long)]
    exact_variance: bool,
    /// One lengthscale per grid axis for gp-grid.
    #[arg(long)]
    ard: bool,
}

impl TuningArgs {
    fn settings(&self, cfg: &Config, default_order: MaternOrder) -> Result<Settings> {
        let d = Settings::default();
        let kernel = match cfg.pick_opt(self.kernel.clone(), "kernel")? {
            Some(k) => Some(k.parse::<Kernel>().map_err(|e| anyhow!("--kernel: {e}"))?),
            None => None,
        };
        let order = match cfg.pick_opt(self.order.clone(), "order")? {
            Some(o) => parse_order(&o)?,
            None => kernel.as_ref().map_or(default_order, Kernel::order),
        };
        Ok(Settings {
            order,
            budget: cfg.pick(self.budget, "budget", d.budget)?,
            seed: cfg.pick(self.seed, "seed", d.seed)?,
            max_projections: cfg.pick(
                self.max_projections,
                "max_projections",
                d.max_projections,
            )?,
            samples: cfg.pick(self.samples, "samples", d.samples)?,
            burn_in: cfg.pick(self.burn_in, "burn_in", d.burn_in)?,
            lengthscale: cfg
                .pick_opt(self.lengthscale, "lengthscale")?
                .or(kernel.as_ref().map(Kernel::lengthscale)),
            amplitude: cfg
                .pick_opt(self.amplitude, "amplitude")?
                .or(kernel.as_ref().map(Kernel::amplitude)),
            noise: cfg.pick_opt(self.noise, "noise")?,
            exact_variance: self.exact_variance || cfg.get("exact_variance")?.unwrap_or(false),
            ard: self.ard || cfg.get("ard")?.unwrap_or(false),
        })
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training CSV.
    #[arg(long)]
    data: PathBuf,
    /// One of full-gp, additive-backfit, additive-vb, additive-mcmc,
    /// ppgpr-greedy, gp-grid.
    #[arg(long)]
    method: Option<String>,
    /// Model JSON to write; timings go to `<out>.timing.json`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    layout: DataLayout,
    #[command(flatten)]
    tuning: TuningArgs,
}

pub fn train(a: TrainArgs, cfg: &Config) -> Result<()> {
    let method: Method = cfg
        .pick(a.method.clone(), "method", "additive-vb".into())?
        .parse::<Method>()?;
    let s = a.tuning.settings(cfg, MaternOrder::SevenHalves)?;
    let ds = load(&a.data, &a.layout, cfg)?;
    let (model, secs) = timed(|| methods::train(method, &ds.x, &ds.y, &ds.provenance, &s));
    let model = model?;
    write_json(&a.out, &serde_json::to_value(&model)?)?;
    write_json(
        &timing_path(&a.out),
        &json!({"method": method.name(), "train_secs": secs}),
    )?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Model JSON written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Test CSV, same layout as the training data.
    #[arg(long)]
    data: PathBuf,
    /// Prediction CSV with columns `mean,variance`.
    #[arg(long)]
    out: PathBuf,
    /// Metrics report; defaults to `<out>.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    layout: DataLayout,
}

pub fn predict(a: PredictArgs, cfg: &Config) -> Result<()> {
    let text =
        fs::read_to_string(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let model: ModelFile = serde_json::from_str(&text).context("parsing model file")?;
    let ds = load(&a.data, &a.layout, cfg)?;
    let (pred, secs) = timed(|| methods::predict(&model, &ds.x));
    let (mean, var) = pred?;
    write_columns(&a.out, &["mean", "variance"], &[&mean, &var])?;
    let train_mean = model.train_y.iter().sum::<f64>() / model.train_y.len() as f64;
    let m = regression_metrics(&ds.y, &mean, &var, train_mean)?;
    let report = a.report.clone().unwrap_or_else(|| json_path(&a.out));
    write_json(
        &report,
        &json!({
            "command": "predict",
            "method": model.method,
            "dataset": ds.provenance,
            "train_dataset": model.dataset,
            "seed": model.seed,
            "version": VERSION,
            "n_test": ds.len(),
            "rejected_rows": ds.rejected_rows,
            "nmse": m.nmse,
            "mnlp": m.mnlp,
        }),
    )?;
    write_json(
        &timing_path(&report),
        &json!({"method": model.method, "predict_secs": secs}),
    )?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    /// Training CSV with 0/1 targets.
    #[arg(long)]
    train: PathBuf,
    /// Test CSV with 0/1 targets.
    #[arg(long)]
    test: PathBuf,
    /// additive-la (default) or full-gp.
    #[arg(long)]
    method: Option<String>,
    /// Probability CSV with one column `p1`.
    #[arg(long)]
    out: PathBuf,
    /// Report; defaults to `<out>.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    layout: DataLayout,
    #[command(flatten)]
    tuning: TuningArgs,
}

pub fn classify(a: ClassifyArgs, cfg: &Config) -> Result<()> {
    let method: Method = cfg
        .pick(a.method.clone(), "method", "additive-la".into())?
        .parse::<Method>()?;
    let mut s = a.tuning.settings(cfg, MaternOrder::FiveHalves)?;
    if a.tuning.budget.is_none() && cfg.get::<usize>("budget")?.is_none() {
        s.budget = 3;
    }
    let train = load(&a.train, &a.layout, cfg)?;
    let test = load(&a.test, &a.layout, cfg)?;
    let out = methods::classify(method, &train.x, &train.y, &test.x, &s)?;
    write_columns(&a.out, &["p1"], &[&out.probabilities])?;
    let m = classification_metrics(&test.y, &out.probabilities)?;
    let report = a.report.clone().unwrap_or_else(|| json_path(&a.out));
    write_json(
        &report,
        &json!({
            "command": "classify",
            "method": method.name(),
            "dataset": train.provenance,
            "test_dataset": test.provenance,
            "seed": s.seed,
            "version": VERSION,
            "n_train": train.len(),
            "n_test": test.len(),
            "error_rate": m.error_rate,
            "mnll": m.mnll,
            "log_evidence": out.evidence,
            "evidence_trace": out.evidence_trace,
            "order": s.order.name(),
            "kernels": kernels_json(&out.kernels),
        }),
    )?;
    write_json(
        &timing_path(&report),
        &json!({
            "method": method.name(),
            "train_secs": out.train_secs,
            "predict_secs": out.predict_secs,
            "total_secs": out.train_secs + out.predict_secs,
        }),
    )?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    /// Comma-separated method names.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated training-set sizes.
    #[arg(long)]
    sizes: Option<String>,
    /// Input dimension of the synthetic data.
    #[arg(long)]
    dims: Option<usize>,
    /// Test points per cell.
    #[arg(long)]
    n_test: Option<usize>,
    /// Seconds after which a method's sweep is censored.
    #[arg(long)]
    limit: Option<f64>,
    /// Trailing points used in each slope fit.
    #[arg(long)]
    slope_points: Option<usize>,
    /// Run the methods concurrently, one thread per method.
    #[arg(long)]
    parallel: bool,
    /// Output prefix: writes `<out>.csv`, `<out>.gp` and `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tuning: TuningArgs,
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<T>().map_err(|e| anyhow!("{t}: {e}")))
        .collect()
}

fn bench_grid(
    n: usize,
    n_test: usize,
    seed: u64,
) -> Result<(GridSpec, Vec<f64>, DMatrix<f64>, Vec<f64>)> {
    let side = ((n as f64).sqrt().round() as usize).max(2);
    let spec = GridSpec::uniform(&[(0.0, 1.0, side), (0.0, 1.0, side)])?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let eps = Normal::new(0.0, 0.1).expect("valid sd");
    let f = |a: f64, b: f64| (6.0 * a).sin() + (4.0 * b).cos();
    let y = (0..spec.len())
        .map(|i| {
            let p = spec.point(i);
            f(p[0], p[1]) + eps.sample(&mut rng)
        })
        .collect();
    let xt = DMatrix::from_fn(n_test, 2, |_, _| rand::Rng::random::<f64>(&mut rng));
    let yt = (0..n_test)
        .map(|i| f(xt[(i, 0)], xt[(i, 1)]) + eps.sample(&mut rng))
        .collect();
    Ok((spec, y, xt, yt))
}

fn bench_cell(
    method: Method,
    n: usize,
    d: usize,
    n_test: usize,
    s: &Settings,
) -> Result<Measurement> {
    if method == Method::GpGrid {
        let (spec, y, xt, yt) = bench_grid(n, n_test, s.seed)?;
        let init = GridHypers::shared(s.order, 0.2, 1.0, 0.1);
        let (fit, tt) = timed(|| grid_fit(&spec, &y, &init, s.budget.max(1)));
        let (model, _) = fit?;
        let (pred, tp) = timed(|| model.predict(&xt, false));
        let (mean, _) = pred?;
        let ybar = y.iter().sum::<f64>() / y.len() as f64;
        let var = vec![model.noise(); n_test];
        let m = regression_metrics(&yt, &mean, &var, ybar)?;
        return Ok(Measurement {
            train_secs: tt,
            predict_secs: tp,
            error: Some(m.nmse),
        });
    }
    if method.is_classifier() {
        let ks = vec![Kernel::new(s.order, 1.0, 4.0)?; d];
        let ds = gen_classification(n + n_test, &ks, s.seed)?;
        let (tr, te) = split(&ds, n_test, s.seed)?;
        let out = methods::classify(method, &tr.x, &tr.y, &te.x, s)?;
        let c = classification_metrics(&te.y, &out.probabilities)?;
        return Ok(Measurement {
            train_secs: out.train_secs,
            predict_secs: out.predict_secs,
            error: Some(c.error_rate),
        });
    }
    let ds = gen_additive(
        n + n_test,
        d,
        &Kernel::new(s.order, 1.0, 1.0)?,
        0.01,
        s.seed,
    )?;
    let (tr, te) = split(&ds, n_test, s.seed)?;
    let (model, tt) = timed(|| methods::train(method, &tr.x, &tr.y, &tr.provenance, s));
    let model = model?;
    let (pred, tp) = timed(|| methods::predict(&model, &te.x));
    let (mean, var) = pred?;
    let ybar = tr.y.iter().sum::<f64>() / tr.len() as f64;
    let m = regression_metrics(&te.y, &mean, &var, ybar)?;
    Ok(Measurement {
        train_secs: tt,
        predict_secs: tp,
        error: Some(m.nmse),
    })
}

pub fn benchmark(a: BenchmarkArgs, cfg: &Config) -> Result<()> {
    let method_list: String = cfg.pick(
        a.methods.clone(),
        "methods",
        "additive-backfit,additive-vb,ppgpr-greedy,full-gp".into(),
    )?;
    let methods: Vec<Method> = parse_list(&method_list)?;
    let sizes: Vec<usize> =
        parse_list(&cfg.pick(a.sizes.clone(), "sizes", "256,512,1024,2048".to_string())?)?;
    ensure!(
        !methods.is_empty() && !sizes.is_empty(),
        "need at least one method and one size"
    );
    let d = cfg.pick(a.dims, "dims", 8usize)?;
    let n_test = cfg.pick(a.n_test, "n_test", 200usize)?;
    let limit = cfg.pick(a.limit, "limit", 120.0f64)?;
    let k = cfg.pick(
        a.slope_points,
        "slope_points",
        structgp::bench::DEFAULT_SLOPE_POINTS,
    )?;
    let parallel = a.parallel || cfg.get("parallel")?.unwrap_or(false);
    let mut s = a.tuning.settings(cfg, MaternOrder::SevenHalves)?;
    if a.tuning.budget.is_none() && cfg.get::<usize>("budget")?.is_none() {
        s.budget = 20;
    }
    let run = |m: Method| -> Result<Vec<BenchCell>> {
        sweep(m.name(), &sizes, limit, |n| {
            if m == Method::FullGp && n > structgp::oracle::DEFAULT_CAP {
                return Ok(Measurement {
                    train_secs: f64::INFINITY,
                    predict_secs: 0.0,
                    error: None,
                });
            }
            let s = Settings {
                budget: if m.is_classifier() {
                    s.budget.min(3)
                } else {
                    s.budget
                },
                ..s.clone()
            };
            bench_cell(m, n, d, n_test, &s)
                .map_err(|e| structgp::GpError::InvalidArgument(format!("{m} at N={n}: {e}")))
        })
        .map_err(Into::into)
    };
    let per_method: Vec<Vec<BenchCell>> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = methods
                .iter()
                .map(|&m| scope.spawn(move || run(m)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| anyhow!("benchmark thread panicked"))?)
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        methods
            .iter()
            .map(|&m| run(m))
            .collect::<Result<Vec<_>>>()?
    };
    let cells: Vec<BenchCell> = per_method.into_iter().flatten().collect();
    let csv_path = a.out.with_extension("csv");
    let dataset = format!("synthetic(d={d}, n_test={n_test})");
    let provenance = [
        ("dataset", dataset.clone()),
        ("seed", s.seed.to_string()),
        ("version", VERSION.to_string()),
    ];
    let file =
        fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    write_cells_csv(&cells, &provenance, file)?;
    let names: Vec<String> = methods.iter().map(|m| m.name().to_string()).collect();
    let png = a.out.with_extension("png");
    fs::write(
        a.out.with_extension("gp"),
        gnuplot_script(&csv_path.to_string_lossy(), &names, &png.to_string_lossy()),
    )?;
    let slopes: Vec<Value> = methods
        .iter()
        .map(|m| match loglog_slope(&cells, m.name(), k) {
            Some(f) => json!({"method": f.method, "slope": f.slope, "intercept": f.intercept, "points": f.points}),
            None => json!({"method": m.name(), "slope": null, "points": 0}),
        })
        .collect();
    let is_classifier = |c: &BenchCell| c.method.parse::<Method>().is_ok_and(|m| m.is_classifier());
    let frontier = |cells: Vec<BenchCell>| -> Vec<Value> {
        pareto_by_size(&cells)
            .into_iter()
            .map(|(n, ms)| json!({"n": n, "frontier": ms}))
            .collect()
    };
    let (cls, reg): (Vec<BenchCell>, Vec<BenchCell>) =
        cells.iter().cloned().partition(is_classifier);
    let pareto = json!({"regression": frontier(reg), "classification": frontier(cls)});
    write_json(
        &a.out.with_extension("json"),
        &json!({
            "command": "benchmark",
            "dataset": dataset,
            "version": VERSION,
            "seed": s.seed,
            "dims": d,
            "n_test": n_test,
            "sizes": sizes,
            "slope_points": k,
            "limit_secs": limit,
            "slopes": slopes,
            "pareto": pareto,
        }),
    )?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    /// Grayscale input image (PNG or PGM).
    #[arg(long)]
    image: PathBuf,
    /// Reconstructed image.
    #[arg(long)]
    out: PathBuf,
    /// Report; defaults to `<out>.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Keep every k-th pixel along each axis for fitting.
    #[arg(long)]
    downsample: Option<usize>,
    /// Marginal-likelihood evaluations for the hyperparameter search.
    #[arg(long)]
    budget: Option<usize>,
    /// Matérn order (default 5/2).
    #[arg(long)]
    order: Option<String>,
    /// Add N(0, sd²) noise to the image before fitting; the input then
    /// serves as the clean reference.
    #[arg(long)]
    add_noise: Option<f64>,
    /// Initial lengthscale in pixels.
    #[arg(long)]
    lengthscale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn denoise(a: DenoiseArgs, cfg: &Config) -> Result<()> {
    let step = cfg.pick(a.downsample, "downsample", 1usize)?;
    ensure!(step >= 1, "downsample factor must be at least 1");
    let budget = cfg.pick(a.budget, "budget", 100usize)?;
    let order = parse_order(&cfg.pick(a.order.clone(), "order", "5/2".to_string())?)?;
    let seed = cfg.pick(a.seed, "seed", 0u64)?;
    let add_noise = cfg.pick_opt(a.add_noise, "add_noise")?;
    let clean = load_image(&a.image).with_context(|| format!("loading {}", a.image.display()))?;
    let shape = clean.spec.shape();
    let mut observed = clean.values.clone();
    if let Some(sd) = add_noise {
        ensure!(sd >= 0.0, "noise sd must be non-negative");
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let eps = Normal::new(0.0, sd).map_err(|e| anyhow!("{e}"))?;
        observed.iter_mut().for_each(|v| *v += eps.sample(&mut rng));
    }
    let (h, w) = (shape[0], shape[1]);
    let rows: Vec<usize> = (0..h).step_by(step).collect();
    let cols: Vec<usize> = (0..w).step_by(step).collect();
    let train_spec = GridSpec::new(vec![
        rows.iter().map(|&r| r as f64).collect(),
        cols.iter().map(|&c| c as f64).collect(),
    ])?;
    let train_y: Vec<f64> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .map(|(r, c)| observed[r * w + c])
        .collect();
    let var = {
        let m = train_y.iter().sum::<f64>() / train_y.len() as f64;
        (train_y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / train_y.len() as f64).max(1e-6)
    };
    let ell = cfg.pick(a.lengthscale, "lengthscale", 3.0 * step as f64)?;
    let init = GridHypers::shared(order, ell, var, 0.1 * var);
    let (fit, fit_secs) = timed(|| grid_fit(&train_spec, &train_y, &init, budget));
    let (model, hypers) = fit?;
    let (pred, predict_secs) = timed(|| model.predict_grid(&clean.spec, false));
    let (recon, _) = pred?;
    let out_grid = GridData::new(clean.spec.clone(), recon.clone())?;
    save_image(&a.out, &out_grid)?;
    let clipped: Vec<f64> = recon.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let report = a.report.clone().unwrap_or_else(|| json_path(&a.out));
    write_json(
        &report,
        &json!({
            "command": "denoise",
            "method": Method::GpGrid.name(),
            "dataset": a.image.to_string_lossy(),
            "version": VERSION,
            "seed": seed,
            "shape": shape,
            "downsample": step,
            "added_noise_sd": add_noise,
            "order": order.name(),
            "lengthscales": hypers.lengthscales,
            "amplitude": hypers.amplitude,
            "noise": hypers.noise,
            "log_z": model.log_z(),
            "input_mse": mse(&observed, &clean.values),
            "output_mse": mse(&clipped, &clean.values),
        }),
    )?;
    write_json(
        &timing_path(&report),
        &json!({"fit_secs": fit_secs, "predict_secs": predict_secs, "total_secs": fit_secs + predict_secs}),
    )?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// additive, classification, product or grid.
    #[arg(long)]
    kind: Option<String>,
    /// Rows to generate (for grid: points per axis).
    #[arg(long)]
    n: Option<usize>,
    /// Input dimension.
    #[arg(long)]
    dims: Option<usize>,
    /// Noise variance (regression kinds).
    #[arg(long)]
    noise: Option<f64>,
    /// Matérn order of the latent functions.
    #[arg(long)]
    order: Option<String>,
    #[arg(long)]
    lengthscale: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Hold out this many rows into --test-out.
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    test_out: Option<PathBuf>,
}

pub fn gen_data(a: GenDataArgs, cfg: &Config) -> Result<()> {
    let kind: String = cfg.pick(a.kind.clone(), "kind", "additive".into())?;
    let n = cfg.pick(a.n, "n", 1000usize)?;
    let d = cfg.pick(a.dims, "dims", 8usize)?;
    let noise = cfg.pick(a.noise, "noise", 0.01f64)?;
    let order = parse_order(&cfg.pick(a.order.clone(), "order", "7/2".to_string())?)?;
    let ell = cfg.pick(a.lengthscale, "lengthscale", 1.0f64)?;
    let amp = cfg.pick(a.amplitude, "amplitude", 1.0f64)?;
    let seed = cfg.pick(a.seed, "seed", 0u64)?;
    let n_test = cfg.pick(a.n_test, "n_test", 0usize)?;
    let kernel = Kernel::new(order, ell, amp)?;
    let ds = match kind.as_str() {
        "additive" => gen_additive(n, d, &kernel, noise, seed)?,
        "classification" => gen_classification(n, &vec![kernel; d], seed)?,
        "product" => gen_product(n, d, noise, seed)?,
        "grid" => gen_grid(n, d, &kernel, noise, seed)?,
        other => {
            bail!("unknown data kind {other:?}; expected additive, classification, product or grid")
        }
    };
    if n_test > 0 {
        let test_out = a
            .test_out
            .clone()
            .ok_or_else(|| anyhow!("--n-test needs --test-out"))?;
        let (tr, te) = split(&ds, n_test, seed)?;
        write_csv(&a.out, &tr)?;
        write_csv(&test_out, &te)?;
    } else {
        write_csv(&a.out, &ds)?;
    }
    Ok(())
}

/// A complete `g^d` grid on `[0,1]^d` with an additive latent function of
/// independent GP draws along each axis plus noise.
fn gen_grid(g: usize, d: usize, kernel: &Kernel, noise: f64, seed: u64) -> Result<Dataset> {
    ensure!(g >= 2 && d >= 1, "grid needs at least 2 points per axis");
    let axis: Vec<f64> = (0..g).map(|i| i as f64 / (g - 1) as f64).collect();
    let spec = GridSpec::new(vec![axis.clone(); d])?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let draws: Vec<Vec<f64>> = (0..d)
        .map(|_| sample_gp(&axis, kernel, &mut rng))
        .collect::<structgp::Result<_>>()?;
    let eps = Normal::new(0.0, noise.sqrt()).map_err(|e| anyhow!("{e}"))?;
    let x = spec.points();
    let y = (0..spec.len())
        .map(|i| {
            let idx = spec.multi_index(i);
            idx.iter()
                .enumerate()
                .map(|(j, &k)| draws[j][k])
                .sum::<f64>()
                + eps.sample(&mut rng)
        })
        .collect();
    Ok(Dataset::new(
        x,
        y,
        format!("gen_grid(g={g}, d={d}, seed={seed})"),
    )?)
}

//! Small unconstrained optimizers and a univariate slice sampler.
//!
//! All optimizers minimize. Objective errors at trial points are treated as
//! `+∞`, so line searches simply back off from them.

use rand::Rng;

use crate::error::{GpError, Result};

/// Outcome of a minimization.
#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Settings shared by the gradient-based minimizers.
#[derive(Clone, Copy, Debug)]
pub struct GradientOptions {
    pub max_iter: usize,
    /// Stop when `‖∇f‖∞` falls below this.
    pub grad_tol: f64,
    /// Stop when the relative decrease of `f` over one iteration falls below this.
    pub f_tol: f64,
    /// History length for L-BFGS.
    pub memory: usize,
}

impl Default for GradientOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-5,
            f_tol: 1e-12,
            memory: 10,
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + a * di).collect()
}

type ValueGrad = (f64, Vec<f64>);

fn eval_safe<F: FnMut(&[f64]) -> Result<ValueGrad>>(
    f: &mut F,
    x: &[f64],
    evals: &mut usize,
) -> Option<ValueGrad> {
    *evals += 1;
    match f(x) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => Some((v, g)),
        _ => None,
    }
}

/// Armijo backtracking along `d` from `x`. Returns the accepted point.
fn backtrack<F: FnMut(&[f64]) -> Result<ValueGrad>>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    gx: &[f64],
    d: &[f64],
    step0: f64,
    evals: &mut usize,
) -> Option<(Vec<f64>, f64, Vec<f64>)> {
    let slope = dot(gx, d);
    if !(slope < 0.0) {
        return None;
    }
    let mut step = step0;
    for _ in 0..40 {
        let xn = axpy(x, step, d);
        if let Some((fv, g)) = eval_safe(f, &xn, evals) {
            if fv <= fx + 1e-4 * step * slope {
                return Some((xn, fv, g));
            }
        }
        step *= 0.5;
    }
    None
}

/// Limited-memory BFGS with Armijo backtracking.
pub fn lbfgs<F>(mut f: F, x0: &[f64], opts: GradientOptions) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<ValueGrad>,
{
    let mut evals = 0;
    let (mut fx, mut gx) = f(x0)?;
    evals += 1;
    if !fx.is_finite() {
        return Err(GpError::OptimizerFailure {
            reason: "objective not finite at start".into(),
            best: x0.to_vec(),
        });
    }
    if let Some(index) = gx.iter().position(|g| !g.is_finite()) {
        return Err(GpError::NonFiniteGradient { index });
    }
    let mut x = x0.to_vec();
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut converged = inf_norm(&gx) < opts.grad_tol;
    let mut it = 0;
    while !converged && it < opts.max_iter {
        it += 1;
        // two-loop recursion
        let mut q = gx.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &q);
            q = axpy(&q, -alpha[i], &y_hist[i]);
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0
        };
        let mut r: Vec<f64> = q.iter().map(|v| v * gamma).collect();
        for i in 0..k {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &r);
            r = axpy(&r, alpha[i] - beta, &s_hist[i]);
        }
        let mut d: Vec<f64> = r.iter().map(|v| -v).collect();
        let mut step0 = if k == 0 {
            (1.0 / inf_norm(&gx).max(1e-12)).min(1.0)
        } else {
            1.0
        };
        if dot(&d, &gx) >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            d = gx.iter().map(|v| -v).collect();
            step0 = (1.0 / inf_norm(&gx).max(1e-12)).min(1.0);
        }
        let Some((xn, fnew, gn)) = backtrack(&mut f, &x, fx, &gx, &d, step0, &mut evals) else {
            if s_hist.is_empty() {
                break;
            }
            s_hist.clear();
            y_hist.clear();
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gn.iter().zip(&gx).map(|(a, b)| a - b).collect();
        if dot(&s, &yv) > 1e-12 * dot(&yv, &yv).sqrt() * dot(&s, &s).sqrt() {
            s_hist.push(s);
            y_hist.push(yv);
            if s_hist.len() > opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let rel = (fx - fnew) / fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        gx = gn;
        converged = inf_norm(&gx) < opts.grad_tol || rel < opts.f_tol;
    }
    Ok(OptimResult {
        x,
        value: fx,
        iterations: it,
        evaluations: evals,
        converged,
    })
}

/// Polak-Ribière nonlinear conjugate gradient with restarts.
pub fn nonlinear_cg<F>(mut f: F, x0: &[f64], opts: GradientOptions) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<ValueGrad>,
{
    let mut evals = 0;
    let (mut fx, mut gx) = f(x0)?;
    evals += 1;
    if !fx.is_finite() || gx.iter().any(|g| !g.is_finite()) {
        return Err(GpError::OptimizerFailure {
            reason: "objective not finite at start".into(),
            best: x0.to_vec(),
        });
    }
    let mut x = x0.to_vec();
    let mut d: Vec<f64> = gx.iter().map(|v| -v).collect();
    let mut step_hint = (1.0 / inf_norm(&gx).max(1e-12)).min(1.0);
    let mut converged = inf_norm(&gx) < opts.grad_tol;
    let mut it = 0;
    while !converged && it < opts.max_iter {
        it += 1;
        if dot(&d, &gx) >= 0.0 {
            d = gx.iter().map(|v| -v).collect();
        }
        let Some((xn, fnew, gn)) = backtrack(&mut f, &x, fx, &gx, &d, step_hint * 2.0, &mut evals)
        else {
            let steepest: Vec<f64> = gx.iter().map(|v| -v).collect();
            if d == steepest {
                break;
            }
            d = steepest;
            continue;
        };
        let s_norm = xn
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        step_hint = (s_norm / inf_norm(&d).max(1e-300)).max(1e-10);
        let diff: Vec<f64> = gn.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let beta = (dot(&gn, &diff) / dot(&gx, &gx).max(1e-300)).max(0.0);
        d = gn.iter().zip(&d).map(|(g, di)| -g + beta * di).collect();
        let rel = (fx - fnew) / fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        gx = gn;
        converged = inf_norm(&gx) < opts.grad_tol || rel < opts.f_tol;
    }
    Ok(OptimResult {
        x,
        value: fx,
        iterations: it,
        evaluations: evals,
        converged,
    })
}

/// Nelder-Mead simplex search with at most `max_evals` evaluations.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], step: f64, max_evals: usize, f_tol: f64) -> OptimResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), v0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }
    let mut it = 0;
    let mut converged = false;
    while evals < max_evals {
        it += 1;
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        if (worst - best).abs() <= f_tol * (best.abs() + f_tol) {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|p| p.0[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..n)
                .map(|j| centroid[j] + t * (simplex[n].0[j] - centroid[j]))
                .collect()
        };
        let xr = along(-1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let xc = along(-0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < fr.min(worst) {
                simplex[n] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for p in simplex.iter_mut().skip(1) {
                    let xs: Vec<f64> =
                        p.0.iter()
                            .zip(&x_best)
                            .map(|(a, b)| b + 0.5 * (a - b))
                            .collect();
                    let v = eval(&xs, &mut evals);
                    *p = (xs, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    OptimResult {
        x,
        value,
        iterations: it,
        evaluations: evals,
        converged,
    }
}

/// Golden-section search for a minimum of `f` on `[a, b]`.
pub fn golden_section<F: FnMut(f64) -> f64>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    tol: f64,
    max_iter: usize,
) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..max_iter {
        if (b - a).abs() <= tol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// One univariate slice-sampling update with stepping out.
pub fn slice_sample<F, R>(mut log_p: F, x0: f64, width: f64, max_steps: usize, rng: &mut R) -> f64
where
    F: FnMut(f64) -> f64,
    R: Rng + ?Sized,
{
    let lp0 = log_p(x0);
    let level = lp0 + rng.random::<f64>().ln();
    let u: f64 = rng.random();
    let mut lo = x0 - u * width;
    let mut hi = lo + width;
    let j = (rng.random::<f64>() * max_steps as f64).floor() as usize;
    let mut k = max_steps.saturating_sub(1).saturating_sub(j);
    let mut j = j;
    while j > 0 && log_p(lo) > level {
        lo -= width;
        j -= 1;
    }
    while k > 0 && log_p(hi) > level {
        hi += width;
        k -= 1;
    }
    for _ in 0..200 {
        let x = lo + rng.random::<f64>() * (hi - lo);
        if log_p(x) > level {
            return x;
        }
        if x < x0 {
            lo = x;
        } else {
            hi = x;
        }
    }
    x0
}

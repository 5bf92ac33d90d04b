//! Linear-time inference for a scalar Gauss-Markov GP on sorted inputs:
//! Kalman filtering, Rauch-Tung-Striebel smoothing, forward-filtering
//! backward-sampling and marginal-likelihood gradients.
//!
//! Observations are `y_t = hᵀz(x_t) + ε_t` with `ε_t ~ N(0, r_t)`. An
//! infinite `r_t` marks a point where the posterior is wanted but no data
//! is observed.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{invalid, GpError, Result};
use crate::kernels::{Discretization, Kernel, StateSpaceModel};
use crate::linalg::{SmallMat, SmallVec};

const PARALLEL_THRESHOLD: usize = 8192;
const LN_2PI: f64 = 1.8378770664093453;

/// Indices that sort `x` ascending, ties kept in their original order.
pub fn sort_permutation(x: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    idx
}

/// Observations sorted by input, with the map back to the caller's order.
#[derive(Clone, Debug)]
pub struct SortedSeries {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    noise: Vec<f64>,
    permutation: Vec<usize>,
}

impl SortedSeries {
    /// Homoscedastic series with noise variance `noise`.
    pub fn new(x: &[f64], y: &[f64], noise: f64) -> Result<Self> {
        Self::with_noise(x, y, &vec![noise; x.len()])
    }

    /// Series with one noise variance per observation. Infinite variances
    /// are allowed and mean "no observation".
    pub fn with_noise(x: &[f64], y: &[f64], noise: &[f64]) -> Result<Self> {
        if x.len() != y.len() || x.len() != noise.len() {
            return Err(invalid(format!(
                "inputs ({}), targets ({}) and noise ({}) differ in length",
                x.len(),
                y.len(),
                noise.len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("input {i} is not finite")));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("target {i} is not finite")));
        }
        if let Some(i) = noise.iter().position(|v| v.is_nan() || *v <= 0.0) {
            return Err(invalid(format!("noise variance {i} must be positive")));
        }
        // Ties are broken by target and noise so the sorted series does not
        // depend on the order the caller supplied the rows in.
        let mut perm: Vec<usize> = (0..x.len()).collect();
        perm.sort_by(|&a, &b| {
            x[a].total_cmp(&x[b])
                .then(y[a].total_cmp(&y[b]))
                .then(noise[a].total_cmp(&noise[b]))
        });
        Ok(Self {
            inputs: perm.iter().map(|&i| x[i]).collect(),
            targets: perm.iter().map(|&i| y[i]).collect(),
            noise: perm.iter().map(|&i| noise[i]).collect(),
            permutation: perm,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Inputs in ascending order.
    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    /// Targets in sorted order.
    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Noise variances in sorted order.
    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    /// `permutation()[k]` is the caller's index of sorted position `k`.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Reorders values given in sorted order back to the caller's order.
    pub fn to_original(&self, sorted: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; sorted.len()];
        for (k, &i) in self.permutation.iter().enumerate() {
            out[i] = sorted[k];
        }
        out
    }
}

/// Transition and noise matrices for every gap of a sorted input vector.
#[derive(Clone, Debug)]
pub struct Chain {
    ssm: StateSpaceModel,
    steps: Vec<Discretization>,
    identity_steps: Vec<bool>,
}

impl Chain {
    /// Discretizes every gap of the ascending `inputs`.
    pub fn new(ssm: &StateSpaceModel, inputs: &[f64]) -> Result<Self> {
        if inputs.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(invalid("chain inputs must be finite and ascending"));
        }
        let gap = |i: usize| inputs[i + 1] - inputs[i];
        let n_gaps = inputs.len().saturating_sub(1);
        let steps: Vec<Discretization> = if n_gaps >= PARALLEL_THRESHOLD {
            (0..n_gaps)
                .into_par_iter()
                .map(|i| ssm.discretize_unchecked(gap(i)))
                .collect()
        } else {
            (0..n_gaps)
                .map(|i| ssm.discretize_unchecked(gap(i)))
                .collect()
        };
        let identity_steps = (0..n_gaps).map(|i| gap(i) == 0.0).collect();
        Ok(Self {
            ssm: ssm.clone(),
            steps,
            identity_steps,
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ssm(&self) -> &StateSpaceModel {
        &self.ssm
    }

    fn check(&self, y: &[f64], noise: &[f64]) -> Result<()> {
        if y.len() != self.len() || noise.len() != self.len() {
            return Err(invalid(format!(
                "chain has {} steps but got {} targets and {} noise values",
                self.len(),
                y.len(),
                noise.len()
            )));
        }
        Ok(())
    }

    /// Forward Kalman pass over targets and noise given in sorted order.
    pub fn filter(&self, y: &[f64], noise: &[f64]) -> Result<FilterPass> {
        self.check(y, noise)?;
        let n = self.len();
        let m = self.ssm.order();
        let mut means = Vec::with_capacity(n);
        let mut covs = Vec::with_capacity(n);
        let mut mean = SmallVec::zeros(m);
        let mut cov = *self.ssm.stationary_cov();
        let mut log_z = 0.0;
        for t in 0..n {
            if t > 0 {
                let s = &self.steps[t - 1];
                if !self.identity_steps[t - 1] {
                    mean = s.phi.mul_vec(&mean);
                    cov = s.phi.congruence(&cov) + s.q;
                }
            }
            let r = noise[t];
            if r.is_finite() {
                let (m2, c2, ll) = update(&mean, &cov, y[t], r, t)?;
                mean = m2;
                cov = c2;
                log_z += ll;
            }
            means.push(mean);
            covs.push(cov);
        }
        Ok(FilterPass { means, covs, log_z })
    }

    /// Backward RTS pass. Returns smoothed moments and lag-one moments.
    pub fn smooth(&self, filtered: &FilterPass) -> Result<Smoothed> {
        let n = self.len();
        let mut means = filtered.means.clone();
        let mut covs = filtered.covs.clone();
        let mut cross = Vec::with_capacity(n.saturating_sub(1));
        for t in (0..n.saturating_sub(1)).rev() {
            let gain = self.gain(t, &filtered.means[t], &filtered.covs[t])?;
            let (mean_pred, cov_pred, j) = (gain.mean_pred, gain.cov_pred, gain.gain);
            let next_mean = means[t + 1];
            let next_cov = covs[t + 1];
            means[t] = filtered.means[t] + j.mul_vec(&(next_mean - mean_pred));
            covs[t] = (filtered.covs[t] + j.congruence(&(next_cov - cov_pred))).symmetrize();
            cross.push(j * next_cov + means[t].outer(&next_mean));
        }
        cross.reverse();
        Ok(Smoothed { means, covs, cross })
    }

    /// Posterior mean of `f` at every step, in sorted order. Skips the lag-one
    /// moments.
    pub fn smooth_f_mean(&self, y: &[f64], noise: &[f64]) -> Result<(Vec<f64>, f64)> {
        let filtered = self.filter(y, noise)?;
        let n = self.len();
        let mut out = vec![0.0; n];
        let mut next = filtered.means[n - 1];
        out[n - 1] = next[0];
        for t in (0..n - 1).rev() {
            let g = self.gain(t, &filtered.means[t], &filtered.covs[t])?;
            next = filtered.means[t] + g.gain.mul_vec(&(next - g.mean_pred));
            out[t] = next[0];
        }
        Ok((out, filtered.log_z))
    }

    /// Posterior mean and variance of `f` at every step, in sorted order.
    pub fn smooth_f_moments(&self, y: &[f64], noise: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let filtered = self.filter(y, noise)?;
        let n = self.len();
        let (mut mu, mut var) = (vec![0.0; n], vec![0.0; n]);
        let mut next_m = filtered.means[n - 1];
        let mut next_p = filtered.covs[n - 1];
        mu[n - 1] = next_m[0];
        var[n - 1] = next_p[(0, 0)];
        for t in (0..n - 1).rev() {
            let g = self.gain(t, &filtered.means[t], &filtered.covs[t])?;
            next_m = filtered.means[t] + g.gain.mul_vec(&(next_m - g.mean_pred));
            next_p = (filtered.covs[t] + g.gain.congruence(&(next_p - g.cov_pred))).symmetrize();
            mu[t] = next_m[0];
            var[t] = next_p[(0, 0)];
        }
        Ok((mu, var, filtered.log_z))
    }

    /// Draws one joint sample of the latent states given the filter pass.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        filtered: &FilterPass,
        rng: &mut R,
    ) -> Result<Vec<SmallVec>> {
        let n = self.len();
        let mut out = vec![SmallVec::zeros(self.ssm.order()); n];
        out[n - 1] = draw(&filtered.means[n - 1], &filtered.covs[n - 1], rng);
        for t in (0..n - 1).rev() {
            if self.identity_steps[t] {
                out[t] = out[t + 1];
                continue;
            }
            let g = self.gain(t, &filtered.means[t], &filtered.covs[t])?;
            let mean = filtered.means[t] + g.gain.mul_vec(&(out[t + 1] - g.mean_pred));
            let cov = (filtered.covs[t] - g.gain.congruence(&g.cov_pred)).symmetrize();
            out[t] = draw(&mean, &cov, rng);
        }
        Ok(out)
    }

    fn gain(&self, t: usize, mean: &SmallVec, cov: &SmallMat) -> Result<Gain> {
        let m = self.ssm.order();
        if self.identity_steps[t] {
            return Ok(Gain {
                mean_pred: *mean,
                cov_pred: *cov,
                gain: SmallMat::identity(m),
            });
        }
        let s = &self.steps[t];
        let mean_pred = s.phi.mul_vec(mean);
        let cov_pred = s.phi.congruence(cov) + s.q;
        // J = P Φᵀ P_pred⁻¹, so J ᵀ solves P_pred Jᵀ = Φ P.
        let rhs = s.phi * *cov;
        let jt = match cov_pred.solve(&rhs) {
            Some(jt) if jt.is_finite() => jt,
            _ => {
                let scale = (0..m)
                    .map(|i| cov_pred[(i, i)])
                    .fold(0.0, f64::max)
                    .max(f64::MIN_POSITIVE);
                let mut found = None;
                for rel in [1e-14, 1e-12, 1e-10, 1e-8] {
                    let reg = cov_pred + SmallMat::identity(m).scale(rel * scale);
                    if let Some(jt) = reg.solve(&rhs).filter(SmallMat::is_finite) {
                        found = Some(jt);
                        break;
                    }
                }
                found.ok_or_else(|| GpError::IllConditioned {
                    step: t,
                    detail: "predicted covariance is singular in the smoother".into(),
                })?
            }
        };
        Ok(Gain {
            mean_pred,
            cov_pred,
            gain: jt.transpose(),
        })
    }
}

struct Gain {
    mean_pred: SmallVec,
    cov_pred: SmallMat,
    gain: SmallMat,
}

fn update(
    mean: &SmallVec,
    cov: &SmallMat,
    y: f64,
    r: f64,
    step: usize,
) -> Result<(SmallVec, SmallMat, f64)> {
    let ph = cov.column(0);
    let s = ph[0].max(0.0) + r;
    if !(s > 0.0) || !s.is_finite() {
        return Err(GpError::IllConditioned {
            step,
            detail: format!("innovation variance {s:e} is not positive"),
        });
    }
    let v = y - mean[0];
    let k = ph.scale(1.0 / s);
    let new_mean = *mean + k.scale(v);
    // Joseph form (I - k hᵀ) P (I - k hᵀ)ᵀ + r k kᵀ
    let m = cov.order();
    let mut ikh = SmallMat::identity(m);
    for i in 0..m {
        ikh[(i, 0)] -= k[i];
    }
    let new_cov = (ikh.congruence(cov) + k.outer(&k).scale(r)).symmetrize();
    let ll = -0.5 * (LN_2PI + s.ln() + v * v / s);
    Ok((new_mean, new_cov, ll))
}

fn draw<R: Rng + ?Sized>(mean: &SmallVec, cov: &SmallMat, rng: &mut R) -> SmallVec {
    let l = cov.psd_cholesky();
    let m = mean.len();
    let mut e = SmallVec::zeros(m);
    for i in 0..m {
        e[i] = rng.sample(StandardNormal);
    }
    *mean + l.mul_vec(&e)
}

/// Filtered state moments after each observation, plus `log p(y)`.
#[derive(Clone, Debug)]
pub struct FilterPass {
    pub means: Vec<SmallVec>,
    pub covs: Vec<SmallMat>,
    pub log_z: f64,
}

/// Smoothed state moments and lag-one moments `E[z_t z_{t+1}ᵀ]`.
#[derive(Clone, Debug)]
pub struct Smoothed {
    pub means: Vec<SmallVec>,
    pub covs: Vec<SmallMat>,
    pub cross: Vec<SmallMat>,
}

/// Output of [`kalman_filter`]; feed it to [`rts_smooth`] or [`ffbs_sample`].
#[derive(Clone, Debug)]
pub struct FilterOutput {
    chain: Arc<Chain>,
    pass: FilterPass,
}

impl FilterOutput {
    pub fn log_z(&self) -> f64 {
        self.pass.log_z
    }

    pub fn filtered_means(&self) -> &[SmallVec] {
        &self.pass.means
    }

    pub fn filtered_covs(&self) -> &[SmallMat] {
        &self.pass.covs
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }
}

/// Filtered and smoothed moments of one chain, all in sorted order.
#[derive(Clone, Debug)]
pub struct SmootherResult {
    pub filtered_means: Vec<SmallVec>,
    pub filtered_covs: Vec<SmallMat>,
    pub means: Vec<SmallVec>,
    pub covs: Vec<SmallMat>,
    /// `E[z_t z_{t+1}ᵀ]` for each adjacent pair.
    pub cross: Vec<SmallMat>,
    pub log_z: f64,
}

impl SmootherResult {
    /// Posterior mean of `f = hᵀz`, sorted order.
    pub fn f_mean(&self) -> Vec<f64> {
        self.means.iter().map(|m| m[0]).collect()
    }

    /// Posterior variance of `f = hᵀz`, sorted order.
    pub fn f_var(&self) -> Vec<f64> {
        self.covs.iter().map(|c| c[(0, 0)]).collect()
    }
}

/// Runs the Kalman filter on a sorted series, starting from `z(x₁) ~ N(0, P∞)`.
pub fn kalman_filter(series: &SortedSeries, ssm: &StateSpaceModel) -> Result<FilterOutput> {
    if series.is_empty() {
        return Err(invalid("cannot filter an empty series"));
    }
    let chain = Arc::new(Chain::new(ssm, series.inputs())?);
    let pass = chain.filter(series.targets(), series.noise())?;
    Ok(FilterOutput { chain, pass })
}

/// RTS smoother over a filter pass.
pub fn rts_smooth(filtered: &FilterOutput) -> Result<SmootherResult> {
    let s = filtered.chain.smooth(&filtered.pass)?;
    Ok(SmootherResult {
        filtered_means: filtered.pass.means.clone(),
        filtered_covs: filtered.pass.covs.clone(),
        means: s.means,
        covs: s.covs,
        cross: s.cross,
        log_z: filtered.pass.log_z,
    })
}

/// Joint posterior sample of the latent states, in sorted order.
pub fn ffbs_sample<R: Rng + ?Sized>(filtered: &FilterOutput, rng: &mut R) -> Result<Vec<SmallVec>> {
    filtered.chain.sample(&filtered.pass, rng)
}

/// Predictive mean and variance of `f` at `test` inputs, returned in the
/// order given. Test points join the chain as observations with infinite
/// noise.
pub fn predict_1d(
    series: &SortedSeries,
    ssm: &StateSpaceModel,
    test: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(i) = test.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!("test input {i} is not finite")));
    }
    if test.is_empty() {
        return Ok((vec![], vec![]));
    }
    let n = series.len();
    let mut x = Vec::with_capacity(n + test.len());
    x.extend_from_slice(series.inputs());
    x.extend_from_slice(test);
    let perm = sort_permutation(&x);
    let xs: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
    let ys: Vec<f64> = perm
        .iter()
        .map(|&i| if i < n { series.targets()[i] } else { 0.0 })
        .collect();
    let rs: Vec<f64> = perm
        .iter()
        .map(|&i| {
            if i < n {
                series.noise()[i]
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let chain = Chain::new(ssm, &xs)?;
    let (mu, var, _) = chain.smooth_f_moments(&ys, &rs)?;
    let mut mean = vec![0.0; test.len()];
    let mut variance = vec![0.0; test.len()];
    for (k, &i) in perm.iter().enumerate() {
        if i >= n {
            mean[i - n] = mu[k];
            variance[i - n] = var[k].max(0.0);
        }
    }
    Ok((mean, variance))
}

/// `log p(y)` and its gradient for a scalar GP on a sorted series.
///
/// The gradient is with respect to `(log ℓ, log σ_f², log c)` where every
/// noise variance is scaled by `c` (so the last entry is `∂/∂ log σ_n²` for
/// a homoscedastic series).
pub fn log_z_gradient(series: &SortedSeries, kernel: &Kernel) -> Result<(f64, [f64; 3])> {
    if series.is_empty() {
        return Err(invalid("cannot differentiate an empty series"));
    }
    let (log_z, g) = sensitivity(
        kernel,
        series.inputs(),
        series.targets(),
        series.noise(),
        None,
    )?;
    Ok((log_z, [g[0], g[1], g[2]]))
}

/// `log p(y)` of the scalar GP on projected inputs `Xw` with homoscedastic
/// noise, and its gradient with respect to `(log ℓ, log σ_f², log σ_n², w)`.
///
/// Gap derivatives are taken with the sort order of `Xw` held fixed.
pub fn log_z_gradient_projected(
    x: &DMatrix<f64>,
    w: &[f64],
    y: &[f64],
    kernel: &Kernel,
    noise: f64,
) -> Result<(f64, Vec<f64>)> {
    let (n, d) = x.shape();
    if w.len() != d {
        return Err(GpError::Shape {
            dim: 1,
            detail: format!("projection has {} weights for {d} columns", w.len()),
        });
    }
    if y.len() != n || n == 0 {
        return Err(invalid(format!(
            "expected {n} > 0 targets, got {}",
            y.len()
        )));
    }
    if !(noise > 0.0 && noise.is_finite()) {
        return Err(invalid("noise variance must be positive"));
    }
    let proj: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|j| x[(i, j)] * w[j]).sum())
        .collect();
    if proj.iter().any(|v| !v.is_finite()) {
        return Err(invalid("projected inputs are not finite"));
    }
    let perm = sort_permutation(&proj);
    let xs: Vec<f64> = perm.iter().map(|&i| proj[i]).collect();
    let ys: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
    let rs = vec![noise; n];
    let gaps: Vec<Vec<f64>> = (0..n.saturating_sub(1))
        .map(|t| {
            (0..d)
                .map(|j| x[(perm[t + 1], j)] - x[(perm[t], j)])
                .collect()
        })
        .collect();
    sensitivity(kernel, &xs, &ys, &rs, Some(&gaps))
}

/// Forward-sensitivity Kalman filter. `gap_grads[t][j]` is `∂Δ_t/∂w_j`.
fn sensitivity(
    kernel: &Kernel,
    x: &[f64],
    y: &[f64],
    noise: &[f64],
    gap_grads: Option<&[Vec<f64>]>,
) -> Result<(f64, Vec<f64>)> {
    let ssm = kernel.to_state_space();
    let m = ssm.order();
    let lambda = ssm.lambda();
    let n_w = gap_grads.map_or(0, |g| g.first().map_or(0, Vec::len));
    let n_p = 3 + n_w;
    let pinf = *ssm.stationary_cov();
    let dpinf_l = ssm.d_stationary_d_lambda().scale(-lambda);

    let mut mean = SmallVec::zeros(m);
    let mut cov = pinf;
    let mut dm = vec![SmallVec::zeros(m); n_p];
    let mut dp = vec![SmallMat::zeros(m); n_p];
    dp[0] = dpinf_l;
    dp[1] = pinf;
    let mut log_z = 0.0;
    let mut grad = vec![0.0; n_p];

    for t in 0..x.len() {
        if t > 0 {
            let delta = x[t] - x[t - 1];
            let disc = ssm.discretize_unchecked(delta);
            let (phi, q) = (disc.phi, disc.q);
            let mean_prev = mean;
            let cov_prev = cov;
            mean = phi.mul_vec(&mean_prev);
            cov = phi.congruence(&cov_prev) + q;

            let dphi_l = ssm.d_transition_d_lambda(delta, &phi).scale(-lambda);
            let x_l = dphi_l * pinf.mul_tr(&phi);
            let dq_l = dpinf_l - phi.congruence(&dpinf_l) - x_l - x_l.transpose();
            let aphi = ssm.d_transition_d_delta(&phi);
            let x_d = aphi * pinf.mul_tr(&phi);
            let dq_d = (x_d + x_d.transpose()).scale(-1.0);

            for p in 0..n_p {
                let (dphi, dq) = match p {
                    0 => (Some(dphi_l), dq_l),
                    1 => (None, q),
                    2 => (None, SmallMat::zeros(m)),
                    _ => {
                        let g = gap_grads.expect("w parameters imply gaps")[t - 1][p - 3];
                        (Some(aphi.scale(g)), dq_d.scale(g))
                    }
                };
                let mut new_dm = phi.mul_vec(&dm[p]);
                let mut new_dp = phi.congruence(&dp[p]) + dq;
                if let Some(dphi) = dphi {
                    new_dm = new_dm + dphi.mul_vec(&mean_prev);
                    let xx = dphi * cov_prev.mul_tr(&phi);
                    new_dp = new_dp + xx + xx.transpose();
                }
                dm[p] = new_dm;
                dp[p] = new_dp;
            }
        }
        let r = noise[t];
        if !r.is_finite() {
            continue;
        }
        let ph = cov.column(0);
        let s = ph[0].max(0.0) + r;
        if !(s > 0.0) || !s.is_finite() {
            return Err(GpError::IllConditioned {
                step: t,
                detail: format!("innovation variance {s:e} is not positive"),
            });
        }
        let v = y[t] - mean[0];
        let k = ph.scale(1.0 / s);
        for p in 0..n_p {
            let dr = if p == 2 { r } else { 0.0 };
            let dph = dp[p].column(0);
            let ds = dph[0] + dr;
            let dv = -dm[p][0];
            grad[p] += -0.5 * (ds / s + 2.0 * v * dv / s - v * v * ds / (s * s));
            let dk = (dph - k.scale(ds)).scale(1.0 / s);
            dm[p] = dm[p] + dk.scale(v) + k.scale(dv);
            dp[p] = (dp[p] - (dph.outer(&ph) + ph.outer(&dph)).scale(1.0 / s)
                + ph.outer(&ph).scale(ds / (s * s)))
            .symmetrize();
        }
        let (m2, c2, ll) = update(&mean, &cov, y[t], r, t)?;
        mean = m2;
        cov = c2;
        log_z += ll;
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(GpError::NonFiniteGradient { index });
    }
    Ok((log_z, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::MaternOrder;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::f64::consts::PI;

    fn random_series(rng: &mut ChaCha20Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 5.0).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| v.sin() + 0.3 * rng.random::<f64>())
            .collect();
        (x, y)
    }

    #[test]
    fn single_observation_log_z() {
        let k = Kernel::new(MaternOrder::Half, 1.0, 1.0).unwrap();
        let s = SortedSeries::new(&[0.3], &[0.0], 1.0).unwrap();
        let f = kalman_filter(&s, &k.to_state_space()).unwrap();
        assert_abs_diff_eq!(f.log_z(), -0.5 * (4.0 * PI).ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(f.log_z(), -1.2655121234846454, epsilon = 1e-9);
    }

    #[test]
    fn smoother_boundary_matches_filter() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (x, y) = random_series(&mut rng, 40);
        let k = Kernel::matern72(0.8, 1.0).unwrap();
        let s = SortedSeries::new(&x, &y, 0.1).unwrap();
        let f = kalman_filter(&s, &k.to_state_space()).unwrap();
        let sm = rts_smooth(&f).unwrap();
        let last = sm.means.len() - 1;
        assert_eq!(sm.means[last], sm.filtered_means[last]);
        assert_eq!(sm.covs[last], sm.filtered_covs[last]);
        assert_eq!(sm.cross.len(), 39);
        for c in &sm.covs {
            assert!(c.min_eigenvalue() >= -1e-9);
            assert!(c[(0, 0)] <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn shuffle_invariance_is_bitwise() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let (x, y) = random_series(&mut rng, 30);
        let k = Kernel::new(MaternOrder::FiveHalves, 0.5, 1.2).unwrap();
        let a = SortedSeries::new(&x, &y, 0.05).unwrap();
        let rev: Vec<usize> = (0..30).rev().collect();
        let xr: Vec<f64> = rev.iter().map(|&i| x[i]).collect();
        let yr: Vec<f64> = rev.iter().map(|&i| y[i]).collect();
        let b = SortedSeries::new(&xr, &yr, 0.05).unwrap();
        let fa = rts_smooth(&kalman_filter(&a, &k.to_state_space()).unwrap()).unwrap();
        let fb = rts_smooth(&kalman_filter(&b, &k.to_state_space()).unwrap()).unwrap();
        assert_eq!(fa.log_z.to_bits(), fb.log_z.to_bits());
        assert_eq!(fa.f_mean(), fb.f_mean());
        let ma = a.to_original(&fa.f_mean());
        let mb = b.to_original(&fb.f_mean());
        for i in 0..30 {
            assert_eq!(ma[i], mb[29 - i]);
        }
    }

    #[test]
    fn far_test_points_revert_to_prior() {
        let k = Kernel::matern72(0.5, 2.0).unwrap();
        let s = SortedSeries::new(&[0.0, 0.1, 0.2], &[1.0, 1.1, 0.9], 0.01).unwrap();
        let (mu, var) = predict_1d(&s, &k.to_state_space(), &[100.0, -100.0]).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(mu[i], 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(var[i], 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn noise_free_interpolation() {
        let k = Kernel::new(MaternOrder::ThreeHalves, 1.0, 1.0).unwrap();
        let x = [0.0, 0.4, 1.1, 2.0];
        let y = [0.3, -0.2, 0.8, 0.1];
        let s = SortedSeries::new(&x, &y, 1e-12).unwrap();
        let (mu, _) = predict_1d(&s, &k.to_state_space(), &[1.1]).unwrap();
        assert_abs_diff_eq!(mu[0], 0.8, epsilon = 1e-6);
    }

    #[test]
    fn ffbs_collapses_without_noise() {
        let k = Kernel::new(MaternOrder::ThreeHalves, 1.0, 1.0).unwrap();
        let x = [0.0, 0.5, 1.0, 1.7];
        let y = [0.2, 0.4, -0.3, 0.9];
        let s = SortedSeries::new(&x, &y, 1e-12).unwrap();
        let f = kalman_filter(&s, &k.to_state_space()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let z = ffbs_sample(&f, &mut rng).unwrap();
        let drawn = s.to_original(&z.iter().map(|v| v[0]).collect::<Vec<_>>());
        for i in 0..4 {
            assert_abs_diff_eq!(drawn[i], y[i], epsilon = 1e-4);
        }
    }

    #[test]
    fn scalar_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (x, y) = random_series(&mut rng, 60);
        for order in MaternOrder::ALL {
            let k = Kernel::new(order, 0.7, 1.3).unwrap();
            let noise = 0.2;
            let s = SortedSeries::new(&x, &y, noise).unwrap();
            let (_, g) = log_z_gradient(&s, &k).unwrap();
            let eval = |ll: f64, la: f64, ln: f64| {
                let k = Kernel::new(order, ll.exp(), la.exp()).unwrap();
                let s = SortedSeries::new(&x, &y, ln.exp()).unwrap();
                kalman_filter(&s, &k.to_state_space()).unwrap().log_z()
            };
            let base = [0.7f64.ln(), 1.3f64.ln(), noise.ln()];
            let h = 1e-5;
            for p in 0..3 {
                let mut up = base;
                let mut dn = base;
                up[p] += h;
                dn[p] -= h;
                let fd = (eval(up[0], up[1], up[2]) - eval(dn[0], dn[1], dn[2])) / (2.0 * h);
                assert_relative_eq!(g[p], fd, max_relative = 1e-5, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn gradient_is_sign_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let (x, y) = random_series(&mut rng, 25);
        let yn: Vec<f64> = y.iter().map(|v| -v).collect();
        let k = Kernel::matern72(0.9, 1.0).unwrap();
        let (_, a) = log_z_gradient(&SortedSeries::new(&x, &y, 0.1).unwrap(), &k).unwrap();
        let (_, b) = log_z_gradient(&SortedSeries::new(&x, &yn, 0.1).unwrap(), &k).unwrap();
        assert_relative_eq!(a[0], b[0], max_relative = 1e-12);
    }
}

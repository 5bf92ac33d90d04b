//! Half-integer Matérn covariance functions and their exact state-space
//! realizations.
//!
//! A Matérn kernel of order ν = p + 1/2 is the stationary covariance of the
//! output of an order-`m = p + 1` linear SDE driven by white noise. With
//! `λ = √(2ν)/ℓ` the drift matrix is the companion matrix of `(s + λ)^m`, so
//! its only eigenvalue is `−λ` and `A + λI` is nilpotent. The transition
//! matrix over a gap `Δ` is therefore the finite series
//! `Φ(Δ) = e^{−λΔ} Σ_{k<m} (A + λI)^k Δ^k / k!`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{invalid, GpError, Result};
use crate::linalg::{solve_lyapunov, SmallMat, SmallVec};

/// Smoothness of a half-integer Matérn kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaternOrder {
    /// ν = 1/2 (Ornstein-Uhlenbeck)
    Half,
    /// ν = 3/2
    ThreeHalves,
    /// ν = 5/2
    FiveHalves,
    /// ν = 7/2
    SevenHalves,
}

impl MaternOrder {
    pub const ALL: [MaternOrder; 4] = [
        Self::Half,
        Self::ThreeHalves,
        Self::FiveHalves,
        Self::SevenHalves,
    ];

    pub fn from_nu(nu: f64) -> Result<Self> {
        match (nu * 2.0).round() as i64 {
            _ if !nu.is_finite() || (nu * 2.0 - (nu * 2.0).round()).abs() > 1e-12 => {
                Err(GpError::UnsupportedKernel(format!(
                    "Matérn order ν={nu} is not a supported half-integer"
                )))
            }
            1 => Ok(Self::Half),
            3 => Ok(Self::ThreeHalves),
            5 => Ok(Self::FiveHalves),
            7 => Ok(Self::SevenHalves),
            _ => Err(GpError::UnsupportedKernel(format!(
                "Matérn order ν={nu} is not supported"
            ))),
        }
    }

    pub fn nu(self) -> f64 {
        self.state_dim() as f64 - 0.5
    }

    /// Dimension `m = ν + 1/2` of the state vector.
    pub fn state_dim(self) -> usize {
        match self {
            Self::Half => 1,
            Self::ThreeHalves => 2,
            Self::FiveHalves => 3,
            Self::SevenHalves => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Half => "matern12",
            Self::ThreeHalves => "matern32",
            Self::FiveHalves => "matern52",
            Self::SevenHalves => "matern72",
        }
    }

    /// Coefficients `a_j` of the polynomial with `k(r)/σ² = e^{−t} Σ_j a_j t^j`, `t = λr`.
    fn poly(self) -> &'static [f64] {
        match self {
            Self::Half => &[1.0],
            Self::ThreeHalves => &[1.0, 1.0],
            Self::FiveHalves => &[1.0, 1.0, 1.0 / 3.0],
            Self::SevenHalves => &[1.0, 1.0, 2.0 / 5.0, 1.0 / 15.0],
        }
    }
}

impl FromStr for MaternOrder {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "matern12" | "matern1/2" | "exponential" | "ou" => Ok(Self::Half),
            "matern32" | "matern3/2" => Ok(Self::ThreeHalves),
            "matern52" | "matern5/2" => Ok(Self::FiveHalves),
            "matern72" | "matern7/2" => Ok(Self::SevenHalves),
            other => Err(GpError::UnsupportedKernel(other.to_string())),
        }
    }
}

/// Lengthscale and amplitude, stored as logarithms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparameters {
    log_lengthscale: f64,
    log_amplitude: f64,
}

impl Hyperparameters {
    pub fn new(lengthscale: f64, amplitude: f64) -> Result<Self> {
        if !(lengthscale.is_finite() && lengthscale > 0.0) {
            return Err(invalid(format!(
                "lengthscale must be positive and finite, got {lengthscale}"
            )));
        }
        if !(amplitude.is_finite() && amplitude > 0.0) {
            return Err(invalid(format!(
                "amplitude must be positive and finite, got {amplitude}"
            )));
        }
        Ok(Self {
            log_lengthscale: lengthscale.ln(),
            log_amplitude: amplitude.ln(),
        })
    }

    pub fn from_log(log_lengthscale: f64, log_amplitude: f64) -> Result<Self> {
        Self::new(log_lengthscale.exp(), log_amplitude.exp())
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    /// Signal variance σ_f².
    pub fn amplitude(&self) -> f64 {
        self.log_amplitude.exp()
    }

    pub fn log_lengthscale(&self) -> f64 {
        self.log_lengthscale
    }

    pub fn log_amplitude(&self) -> f64 {
        self.log_amplitude
    }
}

/// A Matérn covariance function on scalar inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kernel {
    order: MaternOrder,
    hypers: Hyperparameters,
}

impl Default for Kernel {
    fn default() -> Self {
        Self {
            order: MaternOrder::SevenHalves,
            hypers: Hyperparameters {
                log_lengthscale: 0.0,
                log_amplitude: 0.0,
            },
        }
    }
}

impl Kernel {
    pub fn new(order: MaternOrder, lengthscale: f64, amplitude: f64) -> Result<Self> {
        Ok(Self {
            order,
            hypers: Hyperparameters::new(lengthscale, amplitude)?,
        })
    }

    pub fn from_hypers(order: MaternOrder, hypers: Hyperparameters) -> Self {
        Self { order, hypers }
    }

    pub fn matern72(lengthscale: f64, amplitude: f64) -> Result<Self> {
        Self::new(MaternOrder::SevenHalves, lengthscale, amplitude)
    }

    pub fn order(&self) -> MaternOrder {
        self.order
    }

    pub fn hypers(&self) -> Hyperparameters {
        self.hypers
    }

    pub fn lengthscale(&self) -> f64 {
        self.hypers.lengthscale()
    }

    pub fn amplitude(&self) -> f64 {
        self.hypers.amplitude()
    }

    /// Returns a copy with new log-hyperparameters.
    pub fn with_log_hypers(&self, log_lengthscale: f64, log_amplitude: f64) -> Result<Self> {
        Ok(Self {
            order: self.order,
            hypers: Hyperparameters::from_log(log_lengthscale, log_amplitude)?,
        })
    }

    pub fn with_lengthscale(&self, lengthscale: f64) -> Result<Self> {
        Self::new(self.order, lengthscale, self.amplitude())
    }

    pub fn with_amplitude(&self, amplitude: f64) -> Result<Self> {
        Self::new(self.order, self.lengthscale(), amplitude)
    }

    /// Rate `λ = √(2ν)/ℓ` of the state-space realization.
    pub fn lambda(&self) -> f64 {
        (2.0 * self.order.nu()).sqrt() / self.lengthscale()
    }

    /// `k(r)` for a distance `r ≥ 0`.
    pub fn covariance(&self, r: f64) -> Result<f64> {
        if !r.is_finite() || r < 0.0 {
            return Err(invalid(format!(
                "distance must be finite and non-negative, got {r}"
            )));
        }
        Ok(self.eval(r))
    }

    /// `k(|r|)` without argument checks.
    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        let t = self.lambda() * r.abs();
        let poly = self.order.poly();
        let mut s = 0.0;
        for &a in poly.iter().rev() {
            s = s * t + a;
        }
        self.amplitude() * s * (-t).exp()
    }

    /// `∂k(r)/∂ℓ`.
    pub fn d_covariance_d_lengthscale(&self, r: f64) -> f64 {
        let t = self.lambda() * r.abs();
        let poly = self.order.poly();
        let (mut p, mut dp) = (0.0, 0.0);
        for (j, &a) in poly.iter().enumerate() {
            p += a * t.powi(j as i32);
            if j > 0 {
                dp += a * j as f64 * t.powi(j as i32 - 1);
            }
        }
        let dk_dt = self.amplitude() * (-t).exp() * (dp - p);
        -dk_dt * t / self.lengthscale()
    }

    /// Dense covariance matrix between two input sets.
    pub fn matrix(&self, a: &[f64], b: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval(a[i] - b[j]))
    }

    pub fn to_state_space(&self) -> StateSpaceModel {
        StateSpaceModel::from_kernel(self)
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}(lengthscale={}, amplitude={})",
            self.order.name(),
            self.lengthscale(),
            self.amplitude()
        )
    }
}

impl FromStr for Kernel {
    type Err = GpError;

    /// Parses `"matern72(lengthscale=1.0, amplitude=1.0)"`; omitted
    /// arguments default to 1 and a bare family name is accepted.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(open) => {
                let close = s
                    .rfind(')')
                    .ok_or_else(|| invalid(format!("missing ')' in kernel spec {s:?}")))?;
                if close < open || !s[close + 1..].trim().is_empty() {
                    return Err(invalid(format!("malformed kernel spec {s:?}")));
                }
                (&s[..open], &s[open + 1..close])
            }
            None => (s, ""),
        };
        let order: MaternOrder = name.parse()?;
        let (mut lengthscale, mut amplitude) = (1.0, 1.0);
        for part in args.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| invalid(format!("expected key=value, got {part:?}")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| invalid(format!("bad number in {part:?}")))?;
            match key.trim() {
                "lengthscale" | "ell" | "l" => lengthscale = value,
                "amplitude" | "variance" | "sf2" => amplitude = value,
                other => return Err(invalid(format!("unknown kernel argument {other:?}"))),
            }
        }
        Kernel::new(order, lengthscale, amplitude)
    }
}

/// Linear SDE `dz = A z dx + L w(x)` whose first state component is a
/// Matérn process, together with its stationary covariance.
#[derive(Clone, Debug)]
pub struct StateSpaceModel {
    order: usize,
    lambda: f64,
    drift: SmallMat,
    loading: SmallVec,
    spectral_density: f64,
    stationary_cov: SmallMat,
    emission: SmallVec,
    /// `(A + λI)^k / k!`
    nil_terms: Vec<SmallMat>,
    /// `d/dλ (A + λI)^k / k!`
    nil_terms_dlambda: Vec<SmallMat>,
}

/// Transition and process-noise matrices for one input gap.
#[derive(Clone, Copy, Debug)]
pub struct Discretization {
    pub phi: SmallMat,
    pub q: SmallMat,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl StateSpaceModel {
    fn from_kernel(kernel: &Kernel) -> Self {
        let m = kernel.order().state_dim();
        let lambda = kernel.lambda();
        let mut drift = SmallMat::zeros(m);
        let mut drift_dlambda = SmallMat::zeros(m);
        for i in 0..m.saturating_sub(1) {
            drift[(i, i + 1)] = 1.0;
        }
        for k in 0..m {
            let c = binomial(m, k);
            let pow = (m - k) as i32;
            drift[(m - 1, k)] = -c * lambda.powi(pow);
            drift_dlambda[(m - 1, k)] = -c * pow as f64 * lambda.powi(pow - 1);
        }
        let loading = SmallVec::unit(m, m - 1);
        let emission = SmallVec::unit(m, 0);

        let a = drift.to_dmatrix();
        let ll = loading.outer(&loading).to_dmatrix();
        let unit = solve_lyapunov(&a, &ll).expect("companion drift is Hurwitz");
        let spectral_density = kernel.amplitude() / unit[(0, 0)];
        let stationary_cov = SmallMat::from_dmatrix(&(unit * spectral_density)).symmetrize();

        let nil = drift + SmallMat::identity(m).scale(lambda);
        let dnil = drift_dlambda + SmallMat::identity(m);
        let mut powers = vec![SmallMat::identity(m)];
        let mut dpowers = vec![SmallMat::zeros(m)];
        for k in 1..m {
            let prev = powers[k - 1];
            let dprev = dpowers[k - 1];
            // d(N^k) = dN N^{k-1} + N d(N^{k-1})
            dpowers.push(dnil * prev + nil * dprev);
            powers.push(nil * prev);
        }
        let mut fact = 1.0;
        let mut nil_terms = Vec::with_capacity(m);
        let mut nil_terms_dlambda = Vec::with_capacity(m);
        for k in 0..m {
            if k > 0 {
                fact *= k as f64;
            }
            nil_terms.push(powers[k].scale(1.0 / fact));
            nil_terms_dlambda.push(dpowers[k].scale(1.0 / fact));
        }

        Self {
            order: m,
            lambda,
            drift,
            loading,
            spectral_density,
            stationary_cov,
            emission,
            nil_terms,
            nil_terms_dlambda,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Drift matrix `A`.
    pub fn drift(&self) -> &SmallMat {
        &self.drift
    }

    /// Noise loading `L = [0, …, 0, 1]`.
    pub fn loading(&self) -> &SmallVec {
        &self.loading
    }

    /// White-noise spectral density `q`.
    pub fn spectral_density(&self) -> f64 {
        self.spectral_density
    }

    /// Stationary state covariance `P∞`.
    pub fn stationary_cov(&self) -> &SmallMat {
        &self.stationary_cov
    }

    /// Emission vector `h` with `f(x) = hᵀz(x)`.
    pub fn emission(&self) -> &SmallVec {
        &self.emission
    }

    /// `Φ(Δ) = exp(AΔ)` without argument checks.
    #[inline]
    pub fn transition(&self, delta: f64) -> SmallMat {
        let mut acc = SmallMat::zeros(self.order);
        let mut p = 1.0;
        for term in &self.nil_terms {
            acc = acc + term.scale(p);
            p *= delta;
        }
        acc.scale((-self.lambda * delta).exp())
    }

    #[inline]
    pub(crate) fn discretize_unchecked(&self, delta: f64) -> Discretization {
        if delta == 0.0 {
            return Discretization {
                phi: SmallMat::identity(self.order),
                q: SmallMat::zeros(self.order),
            };
        }
        let phi = self.transition(delta);
        let q = (self.stationary_cov - phi.congruence(&self.stationary_cov)).symmetrize();
        Discretization { phi, q }
    }

    /// Transition and process noise for an input gap `Δ ≥ 0`.
    pub fn discretize(&self, delta: f64) -> Result<Discretization> {
        if !delta.is_finite() || delta < 0.0 {
            return Err(invalid(format!(
                "gap must be finite and non-negative, got {delta}"
            )));
        }
        Ok(self.discretize_unchecked(delta))
    }

    /// `∂Φ(Δ)/∂λ` given `Φ(Δ)`.
    pub(crate) fn d_transition_d_lambda(&self, delta: f64, phi: &SmallMat) -> SmallMat {
        let mut acc = SmallMat::zeros(self.order);
        let mut p = 1.0;
        for term in &self.nil_terms_dlambda {
            acc = acc + term.scale(p);
            p *= delta;
        }
        acc.scale((-self.lambda * delta).exp()) - phi.scale(delta)
    }

    /// `∂Φ(Δ)/∂Δ = AΦ(Δ)`.
    pub(crate) fn d_transition_d_delta(&self, phi: &SmallMat) -> SmallMat {
        self.drift * *phi
    }

    /// `∂P∞/∂λ`. State component `i` is the `i`-th derivative of `f`, whose
    /// stationary moments scale as `λ^i` at fixed amplitude.
    pub(crate) fn d_stationary_d_lambda(&self) -> SmallMat {
        let m = self.order;
        SmallMat::from_fn(m, |i, j| {
            (i + j) as f64 * self.stationary_cov[(i, j)] / self.lambda
        })
    }
}

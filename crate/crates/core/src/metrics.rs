//! Test-set error measures for regression and binary classification.

use serde::Serialize;

use crate::error::{invalid, Result};

/// Probabilities are clipped to `[ε, 1 − ε]` before taking logs.
pub const PROB_CLIP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegressionMetrics {
    pub nmse: f64,
    pub mnlp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub error_rate: f64,
    pub mnll: f64,
}

/// Normalised mean squared error against the constant predictor
/// `train_mean`, and the mean negative log predictive density
/// `½ mean[(y − μ)²/v + log v + log 2π]`. `var` must be the predictive
/// variance of `y*`, noise included.
pub fn regression_metrics(
    y: &[f64],
    mean: &[f64],
    var: &[f64],
    train_mean: f64,
) -> Result<RegressionMetrics> {
    let n = y.len();
    if n == 0 {
        return Err(invalid("empty test set"));
    }
    if mean.len() != n || var.len() != n {
        return Err(invalid(format!(
            "{n} targets but {} means and {} variances",
            mean.len(),
            var.len()
        )));
    }
    if let Some(i) = var.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid(format!("predictive variance {i} is not positive")));
    }
    let sse: f64 = y.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum();
    let sst: f64 = y.iter().map(|a| (a - train_mean).powi(2)).sum();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mnlp = 0.5
        * (0..n)
            .map(|i| (y[i] - mean[i]).powi(2) / var[i] + var[i].ln() + ln2pi)
            .sum::<f64>()
        / n as f64;
    Ok(RegressionMetrics {
        nmse: sse / sst,
        mnlp,
    })
}

/// Error rate at threshold ½ and the mean negative log-likelihood
/// `−mean[y log p + (1 − y) log(1 − p)]` of class-1 probabilities `p`.
pub fn classification_metrics(y: &[f64], p: &[f64]) -> Result<ClassificationMetrics> {
    let n = y.len();
    if n == 0 {
        return Err(invalid("empty test set"));
    }
    if p.len() != n {
        return Err(invalid(format!("{n} labels but {} probabilities", p.len())));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("class labels must be 0 or 1"));
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("probabilities must lie in [0, 1]"));
    }
    let wrong = y
        .iter()
        .zip(p)
        .filter(|(&yi, &pi)| (pi > 0.5) != (yi > 0.5))
        .count();
    let nll: f64 = y
        .iter()
        .zip(p)
        .map(|(&yi, &pi)| {
            let q = pi.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            -(yi * q.ln() + (1.0 - yi) * (1.0 - q).ln())
        })
        .sum();
    Ok(ClassificationMetrics {
        error_rate: wrong as f64 / n as f64,
        mnll: nll / n as f64,
    })
}

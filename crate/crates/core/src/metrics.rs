//! Prediction quality metrics.

use std::f64::consts::PI;

use crate::error::{check_dim, GpError, Result};

/// Standardized mean squared error: `sum (y - mu)^2 / (n_* var(y_train))`.
/// Equals one for a predictor that always returns the training mean.
pub fn smse(y_true: &[f64], mu: &[f64], y_train_var: f64) -> Result<f64> {
    check_dim("smse: predictions", y_true.len(), mu.len())?;
    if !(y_train_var > 0.0) {
        return Err(GpError::invalid("smse: training variance must be positive"));
    }
    if y_true.is_empty() {
        return Err(GpError::invalid("smse: no test points"));
    }
    let sse: f64 = y_true.iter().zip(mu).map(|(y, m)| (y - m) * (y - m)).sum();
    Ok(sse / (y_true.len() as f64 * y_train_var))
}

fn log_normal(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (y - mean) * (y - mean) / var)
}

/// Mean standardized log loss against the trivial Gaussian predictor built
/// from the training mean and variance. `var_observed` must include the
/// noise variance. Negative values beat the trivial predictor.
pub fn msll(
    y_true: &[f64],
    mu: &[f64],
    var_observed: &[f64],
    y_train_mean: f64,
    y_train_var: f64,
) -> Result<f64> {
    check_dim("msll: means", y_true.len(), mu.len())?;
    check_dim("msll: variances", y_true.len(), var_observed.len())?;
    if y_true.is_empty() {
        return Err(GpError::invalid("msll: no test points"));
    }
    if !(y_train_var > 0.0) {
        return Err(GpError::invalid("msll: training variance must be positive"));
    }
    if let Some(v) = var_observed.iter().find(|v| !(**v > 0.0)) {
        return Err(GpError::invalid(format!("msll: non-positive predictive variance {v}")));
    }
    let total: f64 = y_true
        .iter()
        .zip(mu)
        .zip(var_observed)
        .map(|((&y, &m), &v)| log_normal(y, y_train_mean, y_train_var) - log_normal(y, m, v))
        .sum();
    Ok(total / y_true.len() as f64)
}

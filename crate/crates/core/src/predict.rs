//! Posterior prediction at arbitrary test supports, and the evaluation
//! metrics used to report experiments.

use crate::error::{Error, Result};
use crate::inference::{qf_marginals, Model, QfMarginals};
use crate::likelihoods::gaussian_log_density;
use crate::supports::Support;

/// Marginals of the latent parameter functions at test rows. Test supports
/// may be of any kind regardless of what the model was trained on; point
/// predictions from area-only training are the area-to-point path.
pub fn predict_f(rows: &[(usize, &Support)], model: &Model) -> Result<QfMarginals> {
    qf_marginals(rows, model)
}

/// Predictive moments of `y` per test row, plus the log predictive density
/// at the observed value when one is supplied (NaN means "not observed").
#[derive(Debug, Clone)]
pub struct Prediction {
    pub f_mean: Vec<Vec<f64>>,
    pub f_var: Vec<Vec<f64>>,
    pub y_mean: Vec<f64>,
    pub y_var: Vec<f64>,
    pub log_density: Vec<Option<f64>>,
}

pub fn predict_y(
    rows: &[(usize, &Support)],
    model: &Model,
    observed: Option<&[f64]>,
) -> Result<Prediction> {
    if let Some(obs) = observed {
        if obs.len() != rows.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                found: obs.len(),
            });
        }
    }
    let marginals = predict_f(rows, model)?;
    let mut y_mean = Vec::with_capacity(rows.len());
    let mut y_var = Vec::with_capacity(rows.len());
    let mut log_density = Vec::with_capacity(rows.len());
    for (i, (task, _)) in rows.iter().enumerate() {
        let kind = &model.likelihoods[*task];
        let (m, v) = (&marginals.mean[i], &marginals.var[i]);
        let (mean, var) = kind.predictive_y_moments(m, v)?;
        y_mean.push(mean);
        y_var.push(var);
        let y = observed.map(|obs| obs[i]).unwrap_or(f64::NAN);
        if y.is_nan() {
            log_density.push(None);
        } else {
            log_density.push(Some(kind.log_predictive_density(y, m, v, &model.gh)?));
        }
    }
    Ok(Prediction {
        f_mean: marginals.mean,
        f_var: marginals.var,
        y_mean,
        y_var,
        log_density,
    })
}

/// Standardized mean squared error: `mean((y - yhat)^2)` divided by the
/// population variance of the test targets.
pub fn smse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch {
            expected: y_true.len(),
            found: y_pred.len(),
        });
    }
    if y_true.len() < 2 {
        return Err(Error::InvalidParameter(
            "SMSE needs at least two targets".into(),
        ));
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let var = y_true.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let mse = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| (t - p) * (t - p))
        .sum::<f64>()
        / n;
    Ok(mse / var)
}

/// Standardized negative log predictive density: the mean negative log
/// density under the model minus the same quantity under a Gaussian fitted
/// to the training targets (moment matching). Negative values beat the
/// trivial baseline.
pub fn snlp(log_densities: &[f64], y_true: &[f64], y_train: &[f64]) -> Result<f64> {
    if log_densities.len() != y_true.len() {
        return Err(Error::DimensionMismatch {
            expected: y_true.len(),
            found: log_densities.len(),
        });
    }
    if y_true.is_empty() {
        return Err(Error::InvalidParameter("SNLP needs targets".into()));
    }
    if y_train.len() < 2 {
        return Err(Error::InvalidParameter(
            "SNLP baseline needs at least two training targets".into(),
        ));
    }
    let n = y_train.len() as f64;
    let mean = y_train.iter().sum::<f64>() / n;
    let var = y_train.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let model_nlp = -log_densities.iter().sum::<f64>() / y_true.len() as f64;
    let baseline_nlp = -y_true
        .iter()
        .map(|y| gaussian_log_density(*y, mean, var))
        .sum::<f64>()
        / y_true.len() as f64;
    Ok(model_nlp - baseline_nlp)
}

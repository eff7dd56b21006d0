//! Scoring of point forecasts and predictive densities.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::exact::{PredictiveDistribution, TargetTransform, LN_2PI};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(mismatch(format!("{a} predictions for {b} targets")));
    }
    if a == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

pub fn rmse(pred_mean: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(pred_mean.len(), targets.len())?;
    let sse: f64 = pred_mean.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / targets.len() as f64).sqrt())
}

fn log_normal_density(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (y - mean) * (y - mean) / var)
}

/// Mean negative log density of `targets` under independent Gaussians.
pub fn gaussian_nlpd(means: &[f64], variances: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(means.len(), targets.len())?;
    check_lengths(variances.len(), targets.len())?;
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidConfig(format!("predictive variance must be positive, got {v}")));
    }
    let total: f64 = (0..targets.len())
        .map(|i| -log_normal_density(targets[i], means[i], variances[i]))
        .sum();
    Ok(total / targets.len() as f64)
}

/// Options for [`nlpd`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NlpdOptions {
    /// Add `log y` for log-transformed models so the score is a density in
    /// the original target space.
    pub jacobian: bool,
}

impl Default for NlpdOptions {
    fn default() -> Self {
        Self { jacobian: true }
    }
}

/// Mean negative log predictive density of noisy targets in the original
/// space. Mixture predictives are scored with the exact log-mean-exp over
/// components.
pub fn nlpd(pred: &PredictiveDistribution, targets: &[f64], options: NlpdOptions) -> Result<f64> {
    check_lengths(pred.len(), targets.len())?;
    let g: Vec<f64> = match pred.transform {
        TargetTransform::None => targets.to_vec(),
        TargetTransform::Log => targets
            .iter()
            .enumerate()
            .map(|(row, &value)| {
                if value > 0.0 {
                    Ok(value.ln())
                } else {
                    Err(Error::NonPositiveTarget { row, value })
                }
            })
            .collect::<Result<_>>()?,
    };
    let noise = pred.noise_variance;
    let mut total = 0.0;
    for i in 0..targets.len() {
        let log_p = match &pred.mixture {
            None => {
                let v = pred.variance[i] + noise;
                if !(v > 0.0) {
                    return Err(Error::InvalidConfig(format!("predictive variance must be positive, got {v}")));
                }
                log_normal_density(g[i], pred.mean[i], v)
            }
            Some(mix) => {
                let logs: Vec<f64> = mix
                    .means
                    .iter()
                    .zip(&mix.variances)
                    .map(|(m, v)| log_normal_density(g[i], m[i], v[i] + noise))
                    .collect();
                let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + (logs.iter().map(|l| (l - max).exp()).sum::<f64>() / logs.len() as f64).ln()
            }
        };
        total -= log_p;
        if pred.transform == TargetTransform::Log && options.jacobian {
            total += g[i];
        }
    }
    Ok(total / targets.len() as f64)
}

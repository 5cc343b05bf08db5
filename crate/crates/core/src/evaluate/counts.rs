use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How R² is defined for count agreement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R2Mode {
    /// Squared Pearson correlation: the R² of an OLS fit of predicted on true counts.
    #[default]
    Ols,
    /// `1 − SS_res / SS_tot` against the identity line `predicted = true`.
    Identity,
}

impl R2Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            R2Mode::Ols => "ols",
            R2Mode::Identity => "identity",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountMetrics {
    /// Missing when the true counts have no variance.
    pub r2: Option<f64>,
    pub rmse: f64,
    pub n: usize,
}

/// Agreement between predicted and true per-vine counts.
pub fn count_metrics(pred: &[f64], truth: &[f64], mode: R2Mode) -> Result<CountMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidParam(format!(
            "count vectors differ in length: {} predicted vs {} true",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidParam("count vectors are empty".into()));
    }
    let n = pred.len() as f64;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    let rmse = (sse / n).sqrt();
    let (sx, sy) = (truth.iter().sum::<f64>(), pred.iter().sum::<f64>());
    // n·Σx² − (Σx)² form: exact for integer counts of realistic size
    let sxx = n * truth.iter().map(|x| x * x).sum::<f64>() - sx * sx;
    let r2 = if sxx <= 0.0 {
        None
    } else {
        match mode {
            R2Mode::Ols => {
                let syy = n * pred.iter().map(|y| y * y).sum::<f64>() - sy * sy;
                let sxy = n * truth.iter().zip(pred).map(|(x, y)| x * y).sum::<f64>() - sx * sy;
                (syy > 0.0).then(|| sxy * sxy / (sxx * syy))
            }
            R2Mode::Identity => Some(1.0 - n * sse / sxx),
        }
    };
    Ok(CountMetrics { r2, rmse, n: pred.len() })
}

//! Regression metrics: mean squared error, mean absolute error and the
//! coefficient of determination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
}

fn check_lengths(y: &[f64], yhat: &[f64], min: usize) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::Argument(format!(
            "length mismatch: {} observed vs {} predicted",
            y.len(),
            yhat.len()
        )));
    }
    if y.len() < min {
        return Err(Error::Argument(format!("need at least {min} values, got {}", y.len())));
    }
    Ok(())
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat, 1)?;
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / y.len() as f64)
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat, 1)?;
    let sae: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum();
    Ok(sae / y.len() as f64)
}

/// `1 - SS_res / SS_tot`. Zero target variance is an error.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat, 2)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot <= 0.0 {
        return Err(Error::DegenerateTarget);
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn metric_triple(y: &[f64], yhat: &[f64]) -> Result<MetricTriple> {
    Ok(MetricTriple {
        mse: mse(y, yhat)?,
        mae: mae(y, yhat)?,
        r2: r2(y, yhat)?,
    })
}

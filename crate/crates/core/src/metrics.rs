//! Estimation-error metrics and trend-line diagnostics.

use crate::error::{Error, Result};
use crate::math;

/// Truth values with magnitude below this are excluded from MAPE.
pub const MAPE_ZERO_THRESHOLD: f64 = 1e-6;

fn check_pair(truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), found: pred.len() });
    }
    if truth.is_empty() {
        return Err(Error::Empty("metric input"));
    }
    Ok(())
}

/// Root-mean-square error in the units of the data.
pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let ss: f64 = truth.iter().zip(pred).map(|(y, f)| (y - f) * (y - f)).sum();
    Ok(math::sqrt(ss / truth.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mape {
    /// Percent.
    pub value: f64,
    /// Rows skipped because `|truth| < MAPE_ZERO_THRESHOLD`.
    pub excluded: usize,
}

/// Mean absolute percentage error over rows with non-negligible truth.
pub fn mape(truth: &[f64], pred: &[f64]) -> Result<Mape> {
    check_pair(truth, pred)?;
    let mut sum = 0.0;
    let mut kept = 0usize;
    for (y, f) in truth.iter().zip(pred) {
        if math::abs(*y) < MAPE_ZERO_THRESHOLD {
            continue;
        }
        sum += math::abs((y - f) / y);
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::UndefinedMetric("every truth value is zero"));
    }
    Ok(Mape { value: 100.0 * sum / kept as f64, excluded: truth.len() - kept })
}

/// Ordinary least-squares line `pred ≈ slope · truth + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendLine {
    pub slope: f64,
    pub intercept: f64,
}

pub fn trend_line(truth: &[f64], pred: &[f64]) -> Result<TrendLine> {
    check_pair(truth, pred)?;
    let n = truth.len() as f64;
    let mx = truth.iter().sum::<f64>() / n;
    let my = pred.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in truth.iter().zip(pred) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedMetric("truth has zero variance"));
    }
    let slope = sxy / sxx;
    Ok(TrendLine { slope, intercept: my - slope * mx })
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Least-squares line through `(ln width, ln value)`; `slope` is the width exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
    /// Points with an exact zero value removed before fitting.
    pub dropped_zeros: usize,
}

/// Fits `value = C * width^slope` by ordinary least squares in log-log space.
pub fn ols_loglog_fit(points: &[(f64, f64)]) -> Result<ExponentFit> {
    if points.len() < 2 {
        return Err(Error::FitUndefined(format!("need at least 2 points, got {}", points.len())));
    }
    for &(w, v) in points {
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::FitUndefined(format!("nonpositive width {w}")));
        }
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::FitUndefined(format!("nonpositive value {v} at width {w}")));
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::FitUndefined("all widths identical".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    // a flat line fitted to flat data is a perfect fit
    let r_squared = if ss_tot <= f64::EPSILON * f64::EPSILON * n {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(ExponentFit { slope, intercept, r_squared, n_points: points.len(), dropped_zeros: 0 })
}

/// As [`ols_loglog_fit`], but exact zeros are dropped and counted first.
pub fn ols_loglog_fit_dropping_zeros(points: &[(f64, f64)]) -> Result<ExponentFit> {
    let kept: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.1 != 0.0).collect();
    let dropped = points.len() - kept.len();
    let mut fit = ols_loglog_fit(&kept)?;
    fit.dropped_zeros = dropped;
    Ok(fit)
}

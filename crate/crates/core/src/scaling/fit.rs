use serde::{Deserialize, Serialize};

use super::grid::RunResult;
use super::spec::{Axis, FlopsColumn};
use crate::error::{Error, Result};

/// `ΔNE(C) = -alpha * log10(C) + beta` fitted by least squares.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub alpha: f64,
    pub beta: f64,
    pub r2: f64,
    /// `observed - fitted`, in the order of the input points.
    pub residuals: Vec<f64>,
}

/// Fits `(C, ΔNE)` pairs. Sums run over the points sorted by value, so the
/// fit does not depend on input order.
pub fn fit_scaling_law(points: &[(f64, f64)]) -> Result<FitResult> {
    if points.iter().any(|&(c, y)| !(c > 0.0) || !c.is_finite() || !y.is_finite()) {
        return Err(Error::Invalid("scaling fit needs positive finite C and finite ΔNE".into()));
    }
    let mut xy: Vec<(f64, f64)> = points.iter().map(|&(c, y)| (c.log10(), y)).collect();
    xy.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let distinct = xy.windows(2).filter(|w| w[0].0 != w[1].0).count() + usize::from(!xy.is_empty());
    if distinct < 2 {
        return Err(Error::Invalid(format!(
            "scaling fit needs at least 2 distinct C values, got {distinct}"
        )));
    }
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let beta = my - slope * mx;
    let residuals: Vec<f64> = points.iter().map(|&(c, y)| y - (slope * c.log10() + beta)).collect();
    let ss_res: f64 = {
        let mut r: Vec<f64> = residuals.iter().map(|r| r * r).collect();
        r.sort_by(f64::total_cmp);
        r.iter().sum()
    };
    let ss_tot: f64 = xy.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(FitResult {
        alpha: -slope,
        beta,
        r2,
        residuals,
    })
}

/// Fit over the mean ΔNE of every successful configuration.
pub fn fit_results(results: &[RunResult], col: FlopsColumn) -> Result<FitResult> {
    let points: Vec<(f64, f64)> = results
        .iter()
        .filter(|r| r.delta_ne_mean.is_finite())
        .map(|r| (r.flops(col) as f64, r.delta_ne_mean))
        .collect();
    fit_scaling_law(&points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub axis: String,
    pub flops_column: String,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FitReport {
    pub fn new(axis: Axis, col: FlopsColumn, fit: &Result<FitResult>) -> Self {
        let (alpha, beta, r2, error) = match fit {
            Ok(f) => (Some(f.alpha), Some(f.beta), Some(f.r2), None),
            Err(e) => (None, None, None, Some(e.to_string())),
        };
        Self {
            axis: axis.name().into(),
            flops_column: col.name().into(),
            alpha,
            beta,
            r2,
            error,
        }
    }
}

/// Depth slope at each width of a grid, and the width where it peaks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthThreshold {
    pub slopes: Vec<(usize, f64)>,
    pub threshold: usize,
}

pub fn width_threshold(results: &[RunResult], col: FlopsColumn) -> Result<WidthThreshold> {
    let mut widths: Vec<usize> = results.iter().map(|r| r.d_model).collect();
    widths.sort_unstable();
    widths.dedup();
    let mut slopes = Vec::new();
    for d in widths {
        let at: Vec<RunResult> = results.iter().filter(|r| r.d_model == d).cloned().collect();
        if let Ok(f) = fit_results(&at, col) {
            slopes.push((d, f.alpha));
        }
    }
    let threshold = slopes
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|s| s.0)
        .ok_or_else(|| Error::Invalid("width threshold needs at least 2 depths per width".into()))?;
    Ok(WidthThreshold { slopes, threshold })
}

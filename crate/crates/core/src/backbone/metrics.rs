use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Head, Labels};
use crate::numerics::bce_term;

/// Prediction clamp shared by losses and metrics.
pub const PRED_EPS: f64 = 1e-7;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PRED_EPS, 1.0 - PRED_EPS)
}

/// Entropy (nats) of a Bernoulli(p) label distribution.
fn label_entropy(p: f64) -> f64 {
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

/// Mean log loss divided by the entropy of the empirical positive rate.
pub fn normalized_entropy(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Invalid(format!(
            "normalized entropy needs equal nonempty inputs, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let p = labels.iter().sum::<f64>() / n;
    if p <= 0.0 || p >= 1.0 {
        return Err(Error::DegenerateLabels { p });
    }
    let loss = preds.iter().zip(labels).map(|(&q, &y)| bce_term(q, y, PRED_EPS)).sum::<f64>() / n;
    Ok(loss / label_entropy(p))
}

/// Percent change of `variant` relative to `baseline`; negative is better.
pub fn delta_ne(variant: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Invalid(format!("baseline NE must be positive, got {baseline}")));
    }
    Ok(100.0 * (variant - baseline) / baseline)
}

/// `sum_h w_h * mean_i BCE(pred[i][h], y[i][h])` over clamped predictions.
pub fn multi_task_loss(preds: &[[f64; 2]], labels: &[Labels], weights: &[f64; 2]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Invalid("multi-task loss needs equal nonempty inputs".into()));
    }
    check_weights(weights)?;
    let n = preds.len() as f64;
    let mut total = 0.0;
    for h in Head::ALL {
        let i = h.index();
        if weights[i] == 0.0 {
            continue;
        }
        let mean = preds
            .iter()
            .zip(labels)
            .map(|(p, y)| bce_term(p[i], y.get(h), PRED_EPS))
            .sum::<f64>()
            / n;
        total += weights[i] * mean;
    }
    Ok(total)
}

pub fn check_weights(weights: &[f64]) -> Result<()> {
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Config(format!("head weight must be nonnegative, got {w}")));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::Config("at least one head weight must be positive".into()));
    }
    Ok(())
}

/// One metric line of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub head: String,
    pub ne: f64,
    pub delta_ne_pct: Option<f64>,
    pub n: usize,
    pub p: f64,
}

/// NE per head for a set of predictions.
pub fn evaluate_heads(preds: &[[f64; 2]], labels: &[Labels]) -> Result<[f64; 2]> {
    let mut out = [0.0; 2];
    for h in Head::ALL {
        let p: Vec<f64> = preds.iter().map(|x| x[h.index()]).collect();
        let y: Vec<f64> = labels.iter().map(|l| l.get(h)).collect();
        out[h.index()] = normalized_entropy(&p, &y)?;
    }
    Ok(out)
}

/// Metric records for both heads, optionally against baseline NEs.
pub fn metric_records(preds: &[[f64; 2]], labels: &[Labels], baseline: Option<[f64; 2]>) -> Result<Vec<MetricRecord>> {
    let ne = evaluate_heads(preds, labels)?;
    Head::ALL
        .iter()
        .map(|&h| {
            let i = h.index();
            let n = labels.len();
            let p = labels.iter().map(|l| l.get(h)).sum::<f64>() / n as f64;
            Ok(MetricRecord {
                head: h.name().to_string(),
                ne: ne[i],
                delta_ne_pct: baseline.map(|b| delta_ne(ne[i], b[i])).transpose()?,
                n,
                p,
            })
        })
        .collect()
}

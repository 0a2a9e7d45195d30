use crate::error::{invalid_input, Result};
use crate::geometry::ChangeClass;

/// Probabilities below this are clamped inside the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Mean cross-entropy of per-point class probabilities against labels.
pub fn loss_cls(predictions: &[[f64; 3]], labels: &[ChangeClass]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(invalid_input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(invalid_input("no predictions"));
    }
    let mut total = 0.0;
    for (p, l) in predictions.iter().zip(labels) {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid_input("probability rows must lie in [0, 1] and sum to 1"));
        }
        total -= p[l.index()].max(LOG_CLAMP).ln();
    }
    Ok(total / predictions.len() as f64)
}

/// Mean squared error between predicted and target confidences.
pub fn loss_conf(predicted: &[f64], targets: &[f64]) -> Result<f64> {
    if predicted.len() != targets.len() {
        return Err(invalid_input(format!("{} predictions for {} targets", predicted.len(), targets.len())));
    }
    if predicted.is_empty() {
        return Err(invalid_input("no confidence pairs"));
    }
    Ok(predicted.iter().zip(targets).map(|(p, t)| (t - p) * (t - p)).sum::<f64>() / predicted.len() as f64)
}

use crate::error::{Error, Result};

/// Predictions are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of squared differences over all elements.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Dimension {
            context: "mse",
            expected: pred.len(),
            actual: target.len(),
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.len() as f64)
}

/// Binary cross entropy of a single prediction.
pub fn bce(pred: f64, target: f64) -> f64 {
    let p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// ∂bce/∂pred. Zero where the clamp is active.
pub fn bce_grad(pred: f64, target: f64) -> f64 {
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pred) {
        return 0.0;
    }
    -target / pred + (1.0 - target) / (1.0 - pred)
}

/// ∂bce(σ(z), t)/∂z, using the same clamp as [`bce`].
pub fn bce_logit_grad(logit: f64, target: f64) -> f64 {
    let p = sigmoid(logit);
    bce_grad(p, target) * p * (1.0 - p)
}

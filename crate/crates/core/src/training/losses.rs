use crate::error::{Error, Result};
use crate::numkit::{log_sigmoid, sigmoid};

/// λ_e = 2 / (1 + exp(−10·e/E)) − 1.
pub fn lambda_schedule(epoch: usize, epochs: usize) -> f64 {
    let e = epoch.min(epochs) as f64;
    let p = e / epochs.max(1) as f64;
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

pub fn joint_loss(pred_loss: f64, bal_loss: f64, lambda: f64) -> f64 {
    pred_loss + lambda * bal_loss
}

/// Mean squared error over every element.
pub fn prediction_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("prediction_loss", &[target.len()], &[pred.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Precondition("prediction_loss on empty input".into()));
    }
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / pred.len() as f64)
}

fn check_labels(logits: &[f64], labels: &[f64]) -> Result<()> {
    if logits.len() != labels.len() {
        return Err(Error::shape("classification labels", &[logits.len()], &[labels.len()]));
    }
    if logits.is_empty() {
        return Err(Error::Precondition("classification loss on empty input".into()));
    }
    crate::seqmodel::check_binary(labels, "label")
}

/// w₊ = N / (2N₊), w₋ = N / (2N₋); a class with no members gets weight 0.
pub fn class_weights(labels: &[f64]) -> (f64, f64) {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|v| **v == 1.0).count() as f64;
    let neg = n - pos;
    let w = |k: f64| if k > 0.0 { n / (2.0 * k) } else { 0.0 };
    (w(pos), w(neg))
}

pub fn weighted_bce(logits: &[f64], labels: &[f64], w_plus: f64, w_minus: f64) -> Result<f64> {
    Ok(weighted_bce_with_grad(logits, labels, w_plus, w_minus)?.0)
}

/// Weighted binary cross-entropy averaged over N, with ∂/∂logit.
pub fn weighted_bce_with_grad(logits: &[f64], labels: &[f64], w_plus: f64, w_minus: f64) -> Result<(f64, Vec<f64>)> {
    check_labels(logits, labels)?;
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            if y == 1.0 {
                loss -= w_plus * log_sigmoid(z);
                w_plus * (sigmoid(z) - 1.0) / n
            } else {
                loss -= w_minus * log_sigmoid(-z);
                w_minus * sigmoid(z) / n
            }
        })
        .collect();
    Ok((loss / n, grad))
}

pub fn focal_loss(logits: &[f64], labels: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    Ok(focal_loss_with_grad(logits, labels, alpha, gamma)?.0)
}

/// −mean α(1 − p_t)^γ log p_t, where p_t is the probability given to the true class.
pub fn focal_loss_with_grad(logits: &[f64], labels: &[f64], alpha: f64, gamma: f64) -> Result<(f64, Vec<f64>)> {
    check_labels(logits, labels)?;
    if !(gamma >= 0.0) {
        return Err(Error::Precondition(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let s = if y == 1.0 { 1.0 } else { -1.0 };
            let log_pt = log_sigmoid(s * z);
            let pt = sigmoid(s * z);
            let q = 1.0 - pt;
            let mod_g = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
            loss -= alpha * mod_g * log_pt;
            // d/dz via p_t = σ(s·z)
            let dz = alpha * s * (gamma * pt * mod_g * log_pt - mod_g * q);
            dz / n
        })
        .collect();
    Ok((loss / n, grad))
}

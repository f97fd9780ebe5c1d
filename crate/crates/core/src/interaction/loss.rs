//! Sigmoid focal loss for multi-label action scores.

use crate::error::{Error, Result};
use crate::model::ActionScores;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalLossSpec {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalLossSpec {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

impl FocalLossSpec {
    pub fn new(gamma: f64, alpha: f64) -> Result<Self> {
        if !(gamma >= 0.0) || !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!(
                "focal loss needs gamma >= 0 and alpha in (0, 1), got {gamma}, {alpha}"
            )));
        }
        Ok(Self { gamma, alpha })
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check_targets(n: usize, targets: &[f64]) -> Result<()> {
    if n != targets.len() {
        return Err(Error::shape(format!(
            "{n} scores but {} targets",
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| **t != 0.0 && **t != 1.0) {
        return Err(Error::invalid(format!("focal target {t} is not 0 or 1")));
    }
    Ok(())
}

/// Loss and gradient of one term given `p`, `ln p` and `ln(1 - p)`.
fn focal_term(p: f64, log_p: f64, log_q: f64, target: f64, spec: &FocalLossSpec) -> (f64, f64) {
    let q = 1.0 - p;
    let g = spec.gamma;
    if target == 1.0 {
        let w = q.powf(g);
        let loss = -spec.alpha * w * log_p;
        let grad = spec.alpha * w * (g * p * log_p - q);
        (loss, grad)
    } else {
        let w = p.powf(g);
        let loss = -(1.0 - spec.alpha) * w * log_q;
        let grad = (1.0 - spec.alpha) * w * (p - g * q * log_q);
        (loss, grad)
    }
}

/// Summed focal loss over classes and its gradient with respect to the logits.
pub fn focal_loss_logits(logits: &[f64], targets: &[f64], spec: &FocalLossSpec) -> Result<(f64, Vec<f64>)> {
    check_targets(logits.len(), targets)?;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(targets) {
        let (l, g) = focal_term(sigmoid(z), -softplus(-z), -softplus(z), y, spec);
        total += l;
        grad.push(g);
    }
    Ok((total, grad))
}

/// Same as [`focal_loss_logits`] starting from probabilities. Scores of
/// exactly 0 or 1 are clamped a hair inside the interval.
pub fn focal_loss(scores: &ActionScores, targets: &[f64], spec: &FocalLossSpec) -> Result<(f64, Vec<f64>)> {
    check_targets(scores.scores.len(), targets)?;
    const CLAMP: f64 = 1e-15;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(targets.len());
    for (&p, &y) in scores.scores.iter().zip(targets) {
        let p = p.clamp(CLAMP, 1.0 - CLAMP);
        let (l, g) = focal_term(p, p.ln(), (-p).ln_1p(), y, spec);
        total += l;
        grad.push(g);
    }
    Ok((total, grad))
}

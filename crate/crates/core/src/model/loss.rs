//! x̂₀ regression plus class-weighted cross-entropy for the discrete heads.

use log::warn;
use serde::{Deserialize, Serialize};

use super::net::BatchOutput;
use super::real::Real;
use crate::error::{Error, Result};

pub const CLASS_WEIGHT_CLIP: (f64, f64) = (1.0, 50.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub behavior: f64,
    pub mode: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { behavior: 0.1, mode: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub mse: f64,
    pub wce_behavior: f64,
    pub wce_mode: f64,
}

/// Inverse-frequency class weights clipped to `clip` and renormalized to
/// mean 1. Classes absent from `counts` get the clip maximum.
pub fn class_weights(counts: &[usize], clip: (f64, f64)) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    let raw: Vec<f64> = counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            if n == 0 || total == 0 {
                warn!("class {c} has no training samples; using weight {}", clip.1);
                clip.1
            } else {
                (total as f64 / n as f64).clamp(clip.0, clip.1)
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

/// `Σ w_y CE / Σ w_y` over the batch; writes logit gradients scaled by
/// `scale` into `grad`.
fn weighted_ce<T: Real>(logits: &[T], labels: &[usize], weights: &[f64], scale: f64, grad: &mut [T]) -> Result<f64> {
    let k = weights.len();
    if logits.len() != labels.len() * k {
        return Err(Error::validation("logit/label shape mismatch"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::validation(format!("class label {y} out of range for {k} classes")));
    }
    let wsum: f64 = labels.iter().map(|&y| weights[y]).sum();
    if wsum <= 0.0 {
        return Ok(0.0);
    }
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let mx = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64_lossy() - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let ce = z.ln() + mx - row[y].to_f64_lossy();
        let w = weights[y] / wsum;
        loss += w * ce;
        for c in 0..k {
            let p = exps[c] / z;
            let t = if c == y { 1.0 } else { 0.0 };
            grad[i * k + c] = T::from_f64_lossy(scale * w * (p - t));
        }
    }
    Ok(loss)
}

/// Total loss and its gradient with respect to the model outputs.
pub fn losses<T: Real>(
    out: &BatchOutput<T>,
    target_x0: &[T],
    behavior_labels: &[usize],
    mode_labels: &[usize],
    behavior_weights: &[f64],
    mode_weights: &[f64],
    lambda: LossWeights,
) -> Result<(LossValue, BatchOutput<T>)> {
    if out.x0.len() != target_x0.len() {
        return Err(Error::validation("prediction/target window shape mismatch"));
    }
    let count = target_x0.len().max(1) as f64;
    let mut d_x0 = vec![T::zero(); out.x0.len()];
    let mut mse = 0.0;
    let g = T::from_f64_lossy(2.0 / count);
    for ((dx, p), t) in d_x0.iter_mut().zip(&out.x0).zip(target_x0) {
        let diff = *p - *t;
        mse += diff.to_f64_lossy() * diff.to_f64_lossy();
        *dx = g * diff;
    }
    mse /= count;

    let mut d_b = vec![T::zero(); out.behavior.len()];
    let mut d_m = vec![T::zero(); out.mode.len()];
    let wce_behavior = weighted_ce(&out.behavior, behavior_labels, behavior_weights, lambda.behavior, &mut d_b)?;
    let wce_mode = weighted_ce(&out.mode, mode_labels, mode_weights, lambda.mode, &mut d_m)?;
    let total = mse + lambda.behavior * wce_behavior + lambda.mode * wce_mode;
    Ok((LossValue { total, mse, wce_behavior, wce_mode }, BatchOutput { x0: d_x0, behavior: d_b, mode: d_m }))
}

//! Training losses: soft Dice on segmentation maps, binary cross-entropy on
//! patch labels, and their sum.
//!
//! Values and gradients are computed in `f64` over flat slices; the network
//! hands over its `f32` outputs and receives `f32` gradients back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dice smoothing term. Sums run over the whole batch.
pub const DICE_EPS: f64 = 1.0;
/// BCE probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub dice_loss: f64,
    pub bce_loss: f64,
    pub total: f64,
    pub batch_size: usize,
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {a} predictions vs {b} targets"
        )));
    }
    Ok(())
}

/// `1 - (2·Σ p·t + eps) / (Σ p + Σ t + eps)`.
pub fn dice_loss_eps(pred: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    check_len("dice", pred.len(), target.len())?;
    let (inter, sum) = dice_sums(pred, target);
    Ok(1.0 - (2.0 * inter + eps) / (sum + eps))
}

pub fn dice_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    dice_loss_eps(pred, target, DICE_EPS)
}

fn dice_sums(pred: &[f64], target: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sum = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * t;
        sum += p + t;
    }
    (inter, sum)
}

/// Dice loss and its gradient with respect to every prediction.
pub fn dice_loss_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("dice", pred.len(), target.len())?;
    let (inter, sum) = dice_sums(pred, target);
    let num = 2.0 * inter + DICE_EPS;
    let den = sum + DICE_EPS;
    let loss = 1.0 - num / den;
    let den2 = den * den;
    let grad = target
        .iter()
        .map(|&t| -(2.0 * t * den - num) / den2)
        .collect();
    Ok((loss, grad))
}

#[inline]
fn clamp_p(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// Mean binary cross-entropy over the batch.
pub fn bce_loss(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_len("bce", pred.len(), label.len())?;
    if pred.is_empty() {
        return Err(Error::ShapeMismatch("bce: empty batch".into()));
    }
    let sum: f64 = pred
        .iter()
        .zip(label)
        .map(|(&p, &y)| {
            let p = clamp_p(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// BCE and its gradient; the gradient is zero where the clamp is active.
pub fn bce_loss_grad(pred: &[f64], label: &[f64]) -> Result<(f64, Vec<f64>)> {
    let loss = bce_loss(pred, label)?;
    let n = pred.len() as f64;
    let grad = pred
        .iter()
        .zip(label)
        .map(|(&p, &y)| {
            if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                0.0
            } else {
                (-y / p + (1.0 - y) / (1.0 - p)) / n
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Classification inputs for the multi-task objective.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierTerms<'a> {
    pub pred: &'a [f64],
    pub label: &'a [f64],
}

/// Dice plus (in multi-task mode) weighted BCE. With the default weight of
/// 1.0 this is the plain arithmetic sum.
pub fn total_loss(
    seg_pred: &[f64],
    seg_target: &[f64],
    cls: Option<ClassifierTerms<'_>>,
    multitask: bool,
    cls_weight: f64,
    batch_size: usize,
) -> Result<LossReport> {
    let dice = dice_loss(seg_pred, seg_target)?;
    let bce = if multitask {
        let c = cls.ok_or_else(|| {
            Error::ShapeMismatch("multi-task loss needs classifier outputs and labels".into())
        })?;
        bce_loss(c.pred, c.label)?
    } else {
        0.0
    };
    Ok(LossReport {
        dice_loss: dice,
        bce_loss: bce,
        total: dice + cls_weight * bce,
        batch_size,
    })
}

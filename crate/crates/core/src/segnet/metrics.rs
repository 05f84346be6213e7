//! Segmentation metrics: Dice and Jaccard coefficients with a smoothing
//! term, hard IoU, binary accuracy, and the Dice loss. Sums are taken over
//! the whole batch (batch-global reduction) and accumulated in f64.

use crate::error::{Error, Result};
use crate::segnet::ops::Scalar;

fn check_dims(p: usize, g: usize) -> Result<()> {
    if p != g {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {p} elements, target has {g}"
        )));
    }
    Ok(())
}

fn sums<F: Scalar>(probs: &[F], targets: &[F]) -> (f64, f64, f64) {
    let mut sp = 0f64;
    let mut sg = 0f64;
    let mut spg = 0f64;
    for (p, g) in probs.iter().zip(targets) {
        let p = p.to_f64().unwrap_or(0.0);
        let g = g.to_f64().unwrap_or(0.0);
        sp += p;
        sg += g;
        spg += p * g;
    }
    (sp, sg, spg)
}

/// Dice coefficient: (2 * sum(p*g) + eps) / (sum(p) + sum(g) + eps).
pub fn dice_coeff<F: Scalar>(probs: &[F], targets: &[F], eps: f64) -> Result<f64> {
    check_dims(probs.len(), targets.len())?;
    let (sp, sg, spg) = sums(probs, targets);
    Ok((2.0 * spg + eps) / (sp + sg + eps))
}

/// Jaccard coefficient: (sum(p*g) + eps) / (sum(p) + sum(g) - sum(p*g) + eps).
pub fn jaccard_coeff<F: Scalar>(probs: &[F], targets: &[F], eps: f64) -> Result<f64> {
    check_dims(probs.len(), targets.len())?;
    let (sp, sg, spg) = sums(probs, targets);
    Ok((spg + eps) / (sp + sg - spg + eps))
}

/// IoU on hard masks: probs are thresholded, then intersection / union.
/// An empty union counts as perfect agreement.
pub fn iou_hard<F: Scalar>(probs: &[F], targets: &[F], threshold: f64) -> Result<f64> {
    check_dims(probs.len(), targets.len())?;
    let thr = F::from_f64_lossy(threshold);
    let half = F::from_f64_lossy(0.5);
    let mut inter = 0u64;
    let mut union = 0u64;
    for (p, g) in probs.iter().zip(targets) {
        let pv = *p >= thr;
        let gv = *g >= half;
        if pv && gv {
            inter += 1;
        }
        if pv || gv {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Fraction of pixels where (probs >= threshold) agrees with the target.
pub fn binary_accuracy<F: Scalar>(probs: &[F], targets: &[F], threshold: f64) -> Result<f64> {
    check_dims(probs.len(), targets.len())?;
    if probs.is_empty() {
        return Ok(1.0);
    }
    let thr = F::from_f64_lossy(threshold);
    let half = F::from_f64_lossy(0.5);
    let agree = probs
        .iter()
        .zip(targets)
        .filter(|(p, g)| (**p >= thr) == (**g >= half))
        .count();
    Ok(agree as f64 / probs.len() as f64)
}

/// Dice loss: 1 - dice_coeff. Differentiable in the predictions.
pub fn dice_loss<F: Scalar>(probs: &[F], targets: &[F], eps: f64) -> Result<f64> {
    Ok(1.0 - dice_coeff(probs, targets, eps)?)
}

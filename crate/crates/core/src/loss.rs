//! Segmentation and joint training objectives.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Result};
use crate::mask::LabelMap;
use crate::math;

/// Probabilities below this are clamped inside the log.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the pattern-map loss.
    pub alpha_loss: f64,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_loss: 0.6,
            ce_weight: 1.0,
            dice_weight: 1.0,
            dice_smooth: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_loss >= 0.0) {
            return Err(config_err!("alpha_loss must be non-negative, got {}", self.alpha_loss));
        }
        if !(self.dice_smooth > 0.0) || self.ce_weight < 0.0 || self.dice_weight < 0.0 {
            return Err(config_err!("loss weights must be non-negative and dice_smooth positive"));
        }
        Ok(())
    }
}

/// Softmax over the `K` category-major channels at each of `n` pixels.
pub fn softmax_channels(response: &[f64], num_classes: usize) -> Vec<f64> {
    let n = response.len() / num_classes;
    let mut out = vec![0.0; response.len()];
    let mut buf = vec![0.0; num_classes];
    for i in 0..n {
        for k in 0..num_classes {
            buf[k] = response[k * n + i];
        }
        math::softmax_in_place(&mut buf);
        for k in 0..num_classes {
            out[k * n + i] = buf[k];
        }
    }
    out
}

/// Gradient through [`softmax_channels`] given its output.
pub fn softmax_channels_backward(probs: &[f64], d_probs: &[f64], num_classes: usize) -> Vec<f64> {
    let n = probs.len() / num_classes;
    let mut out = vec![0.0; probs.len()];
    for i in 0..n {
        let inner: f64 = (0..num_classes).map(|k| probs[k * n + i] * d_probs[k * n + i]).sum();
        for k in 0..num_classes {
            out[k * n + i] = probs[k * n + i] * (d_probs[k * n + i] - inner);
        }
    }
    out
}

fn check(probs: &[f64], labels: &LabelMap, num_classes: usize) -> Result<usize> {
    let n = labels.height() * labels.width();
    if num_classes == 0 || probs.len() != num_classes * n {
        return Err(usage_err!(
            "{} probabilities do not match {num_classes} classes over {n} pixels",
            probs.len()
        ));
    }
    labels.check_range(num_classes)?;
    Ok(n)
}

/// Weighted pixel-mean cross-entropy plus mean soft Dice loss, and its
/// gradient w.r.t. the category-major probabilities.
pub fn seg_loss_grad(
    probs: &[f64],
    labels: &LabelMap,
    num_classes: usize,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let n = check(probs, labels, num_classes)?;
    let gt = labels.as_slice();
    let mut grad = vec![0.0; probs.len()];

    let mut ce = 0.0;
    for (i, &g) in gt.iter().enumerate() {
        let j = g as usize * n + i;
        let p = probs[j];
        if p > LOG_FLOOR {
            ce -= math::ln(p);
            grad[j] -= cfg.ce_weight / (n as f64 * p);
        } else {
            ce -= math::ln(LOG_FLOOR);
        }
    }
    ce /= n as f64;

    let eps = cfg.dice_smooth;
    let mut dice = 0.0;
    for k in 0..num_classes {
        let channel = &probs[k * n..(k + 1) * n];
        let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
        for (p, &g) in channel.iter().zip(gt) {
            let g = f64::from(u8::from(g as usize == k));
            inter += p * g;
            psum += p;
            gsum += g;
        }
        let a = 2.0 * inter + eps;
        let b = psum + gsum + eps;
        dice += 1.0 - a / b;
        let scale = cfg.dice_weight / num_classes as f64;
        for (i, &g) in gt.iter().enumerate() {
            let g = f64::from(u8::from(g as usize == k));
            grad[k * n + i] -= scale * (2.0 * g * b - a) / (b * b);
        }
    }
    dice /= num_classes as f64;
    Ok((cfg.ce_weight * ce + cfg.dice_weight * dice, grad))
}

/// Weighted pixel-mean cross-entropy plus mean soft Dice loss.
pub fn seg_loss(probs: &[f64], labels: &LabelMap, num_classes: usize, cfg: &LossConfig) -> Result<f64> {
    seg_loss_grad(probs, labels, num_classes, cfg).map(|(l, _)| l)
}

/// `seg + alpha_loss * aux`.
pub fn total_loss(seg: f64, aux: f64, cfg: &LossConfig) -> f64 {
    seg + cfg.alpha_loss * aux
}

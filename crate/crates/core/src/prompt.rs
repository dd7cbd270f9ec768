//! Pattern maps and dense point prompts from semantic features.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Result};
use crate::mask::LabelMap;
use crate::math::{self, matvec, matvec_t_acc, outer_acc, softmax_in_place};
use crate::params::{init_gaussian, tensor, NamedTensor, Parameters};
use crate::rng::RngHandle;
use crate::tensor::Grid;
use crate::types::{Branch, DenseFeature, PatternMap, PointPrompt, PromptSet, BACKGROUND};

/// Kernel-size-1 projection from `C` feature channels to `K` category logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptHeadParams {
    pub channels: usize,
    pub num_classes: usize,
    /// `K x C`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl PromptHeadParams {
    pub fn init(channels: usize, num_classes: usize, rng: &mut RngHandle) -> Self {
        Self {
            channels,
            num_classes,
            weights: init_gaussian(rng, num_classes * channels, 0.02),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            channels: self.channels,
            num_classes: self.num_classes,
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.num_classes],
        }
    }
}

impl Parameters for PromptHeadParams {
    fn named(&self) -> Vec<NamedTensor<'_>> {
        vec![
            tensor("proj_weights", &[self.num_classes, self.channels], &self.weights),
            tensor("proj_bias", &[self.num_classes], &self.bias),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weights, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptGenConfig {
    /// Activation threshold `t` on pattern-map probabilities, in `(0, 1)`.
    pub threshold: f64,
    pub max_prompts_per_category: usize,
}

impl Default for PromptGenConfig {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            max_prompts_per_category: 256,
        }
    }
}

impl PromptGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(config_err!("prompt threshold {} outside (0, 1)", self.threshold));
        }
        Ok(())
    }
}

/// `softmax(W f + b)` per cell.
pub fn pattern_maps(feat: &DenseFeature, params: &PromptHeadParams) -> Result<PatternMap> {
    feat.expect_source(Branch::Semantic)?;
    let (c, k) = (params.channels, params.num_classes);
    if feat.channels() != c || params.weights.len() != k * c || params.bias.len() != k {
        return Err(config_err!(
            "prompt head ({k}x{c}) does not fit a {}-channel feature",
            feat.channels()
        ));
    }
    let (rows, cols) = (feat.rows(), feat.cols());
    let n = rows * cols;
    let mut probs = vec![0.0; k * n];
    let mut logits = vec![0.0; k];
    for i in 0..n {
        matvec(&params.weights, feat.values.at(i), &mut logits);
        for (l, b) in logits.iter_mut().zip(&params.bias) {
            *l += b;
        }
        softmax_in_place(&mut logits);
        for (ki, &p) in logits.iter().enumerate() {
            probs[ki * n + i] = p;
        }
    }
    PatternMap::new(k, rows, cols, probs)
}

/// Back-propagates `d_maps` (same layout as the pattern map) through the
/// softmax and projection; returns the feature gradient.
pub fn pattern_maps_backward(
    feat: &DenseFeature,
    params: &PromptHeadParams,
    maps: &PatternMap,
    d_maps: &[f64],
    grads: &mut PromptHeadParams,
) -> Grid {
    let k = params.num_classes;
    let n = maps.rows * maps.cols;
    let mut d_feat = Grid::zeros(feat.rows(), feat.cols(), feat.channels());
    let mut d_logits = vec![0.0; k];
    for i in 0..n {
        let inner: f64 = (0..k).map(|ki| d_maps[ki * n + i] * maps.probs[ki * n + i]).sum();
        for (ki, d) in d_logits.iter_mut().enumerate() {
            *d = maps.probs[ki * n + i] * (d_maps[ki * n + i] - inner);
        }
        outer_acc(&mut grads.weights, &d_logits, feat.values.at(i));
        for (g, d) in grads.bias.iter_mut().zip(&d_logits) {
            *g += d;
        }
        matvec_t_acc(&params.weights, &d_logits, d_feat.at_mut(i));
    }
    d_feat
}

/// Dense positive prompts for every non-background category.
///
/// Cells with probability above the threshold become prompts at their patch
/// centers. When a category has more active cells than the cap, the most
/// probable ones are kept (earlier row-major cells win ties). Output is in
/// row-major cell order.
pub fn extract_prompts(maps: &PatternMap, cfg: &PromptGenConfig, stride: usize) -> Vec<PromptSet> {
    let n = maps.rows * maps.cols;
    (0..maps.num_classes)
        .filter(|&k| k != BACKGROUND)
        .map(|k| {
            let channel = maps.channel(k);
            let mut active: Vec<usize> = (0..n).filter(|&i| channel[i] > cfg.threshold).collect();
            if active.len() > cfg.max_prompts_per_category {
                active.sort_by(|&a, &b| channel[b].total_cmp(&channel[a]).then(a.cmp(&b)));
                active.truncate(cfg.max_prompts_per_category);
                active.sort_unstable();
            }
            PromptSet {
                category: k,
                prompts: active
                    .into_iter()
                    .map(|i| PointPrompt::at_cell(i / maps.cols, i % maps.cols, stride, k))
                    .collect(),
            }
        })
        .collect()
}

fn check_same_shape(maps: &PatternMap, target: &PatternMap) -> Result<()> {
    if !maps.same_shape(target) {
        return Err(usage_err!(
            "pattern map shapes differ: {}x{}x{} vs {}x{}x{}",
            maps.num_classes,
            maps.rows,
            maps.cols,
            target.num_classes,
            target.rows,
            target.cols
        ));
    }
    Ok(())
}

/// Auxiliary supervision `||T - T_gt||_F / K`.
pub fn aux_loss(maps: &PatternMap, target: &PatternMap) -> Result<f64> {
    check_same_shape(maps, target)?;
    let sq: f64 = maps
        .probs
        .iter()
        .zip(&target.probs)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(math::sqrt(sq) / maps.num_classes as f64)
}

/// Gradient of [`aux_loss`] w.r.t. the predicted maps (zero where the loss is zero).
pub fn aux_loss_grad(maps: &PatternMap, target: &PatternMap) -> Result<Vec<f64>> {
    check_same_shape(maps, target)?;
    let norm = math::sqrt(
        maps.probs
            .iter()
            .zip(&target.probs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum(),
    );
    if norm == 0.0 {
        return Ok(vec![0.0; maps.probs.len()]);
    }
    let scale = 1.0 / (norm * maps.num_classes as f64);
    Ok(maps
        .probs
        .iter()
        .zip(&target.probs)
        .map(|(a, b)| scale * (a - b))
        .collect())
}

/// One-hot target grid: each `stride x stride` block takes its majority label,
/// ties going to the lowest label.
pub fn downsample_gt(labels: &LabelMap, num_classes: usize, stride: usize) -> Result<PatternMap> {
    let (h, w) = (labels.height(), labels.width());
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(usage_err!("{h}x{w} label map not divisible by stride {stride}"));
    }
    labels.check_range(num_classes)?;
    let (rows, cols) = (h / stride, w / stride);
    let n = rows * cols;
    let mut probs = vec![0.0; num_classes * n];
    let mut counts = vec![0usize; num_classes];
    for r in 0..rows {
        for c in 0..cols {
            counts.iter_mut().for_each(|v| *v = 0);
            for y in r * stride..(r + 1) * stride {
                for x in c * stride..(c + 1) * stride {
                    counts[labels.get(y, x) as usize] += 1;
                }
            }
            let mut best = 0;
            for k in 1..num_classes {
                if counts[k] > counts[best] {
                    best = k;
                }
            }
            probs[best * n + r * cols + c] = 1.0;
        }
    }
    PatternMap::new(num_classes, rows, cols, probs)
}

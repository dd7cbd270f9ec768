//! Iterative prompt decoding with dual-score selection and coverage pruning.
//!
//! For one category the loop repeatedly samples a batch of prompts from the
//! remaining pool, decodes each into a mask, scores every nonempty mask by
//! `s_iou * s_sem`, and keeps only the best candidate of the batch when its
//! fused score exceeds the mask threshold. Prompts covered by an accepted mask
//! are dropped from the pool. The sampled batch itself is always consumed, so
//! the loop ends after at most `ceil(|P| / batch_size)` iterations even when
//! nothing is ever accepted.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::PromptDecoder;
use crate::error::{config_err, usage_err, Result};
use crate::mask::BitMask;
use crate::math::{matvec, matvec_t_acc, outer_acc, sigmoid};
use crate::params::{init_gaussian, tensor, NamedTensor, Parameters};
use crate::rng::RngHandle;
use crate::tensor::Grid;
use crate::types::{Branch, DenseFeature, PointPrompt, PromptSet, ScoredMask, SegmentationResult, BACKGROUND};

/// Linear scorer over mask-pooled semantic features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub channels: usize,
    pub num_classes: usize,
    /// `K x C`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ScorerParams {
    /// Small random weights; the bias starts near `sigmoid(2.2) ~ 0.9`.
    pub fn init(channels: usize, num_classes: usize, rng: &mut RngHandle) -> Self {
        Self {
            channels,
            num_classes,
            weights: init_gaussian(rng, num_classes * channels, 0.02),
            bias: vec![2.2; num_classes],
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

    fn validate(&self, feat: &DenseFeature, category: usize) -> Result<()> {
        let (c, k) = (self.channels, self.num_classes);
        if feat.channels() != c || self.weights.len() != k * c || self.bias.len() != k {
            return Err(config_err!(
                "scorer ({k}x{c}) does not fit a {}-channel feature",
                feat.channels()
            ));
        }
        if category >= k {
            return Err(usage_err!("category {category} out of range for {k} classes"));
        }
        Ok(())
    }
}

impl Parameters for ScorerParams {
    fn named(&self) -> Vec<NamedTensor<'_>> {
        vec![
            tensor("score_weights", &[self.num_classes, self.channels], &self.weights),
            tensor("score_bias", &[self.num_classes], &self.bias),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Feature-grid cells selected by a pixel mask: a cell is active when more
/// than half of its pixels are set; if none qualifies, the single cell with the
/// largest covered fraction is used (lowest row-major index on ties).
pub fn project_mask(mask: &BitMask, feat: &DenseFeature) -> Result<Vec<usize>> {
    let (h, w) = feat.image_size();
    if mask.height() != h || mask.width() != w {
        return Err(usage_err!(
            "{}x{} mask does not match the {h}x{w} image of the feature grid",
            mask.height(),
            mask.width()
        ));
    }
    if mask.is_empty() {
        return Err(usage_err!("cannot project an empty mask"));
    }
    let (s, cols) = (feat.stride, feat.cols());
    let mut counts = vec![0usize; feat.rows() * cols];
    for i in mask.ones() {
        let (y, x) = (i / w, i % w);
        counts[(y / s) * cols + x / s] += 1;
    }
    let area = s * s;
    let active: Vec<usize> = (0..counts.len()).filter(|&i| 2 * counts[i] > area).collect();
    if !active.is_empty() {
        return Ok(active);
    }
    let mut best = 0;
    for (i, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = i;
        }
    }
    Ok(vec![best])
}

/// Intermediates of one semantic score.
#[derive(Clone, Debug)]
pub struct ScoreCache {
    pub active: Vec<usize>,
    pooled: Vec<f64>,
    pub category: usize,
    pub score: f64,
}

/// Semantic score from cells selected by [`project_mask`].
pub fn semantic_score_cells(
    active: Vec<usize>,
    feat_sem: &DenseFeature,
    params: &ScorerParams,
    category: usize,
) -> Result<ScoreCache> {
    feat_sem.expect_source(Branch::Semantic)?;
    params.validate(feat_sem, category)?;
    let c = params.channels;
    let mut pooled = vec![0.0; c];
    for &i in &active {
        for (p, v) in pooled.iter_mut().zip(feat_sem.values.at(i)) {
            *p += v;
        }
    }
    let n = active.len() as f64;
    pooled.iter_mut().for_each(|p| *p /= n);
    let row = &params.weights[category * c..(category + 1) * c];
    let mut z = [0.0];
    matvec(row, &pooled, &mut z);
    let score = sigmoid(z[0] + params.bias[category]);
    Ok(ScoreCache {
        active,
        pooled,
        category,
        score,
    })
}

/// `sigmoid(W pool(F_sem, mask) + b)[k]`.
pub fn semantic_score(
    mask: &BitMask,
    feat_sem: &DenseFeature,
    params: &ScorerParams,
    category: usize,
) -> Result<f64> {
    let active = project_mask(mask, feat_sem)?;
    Ok(semantic_score_cells(active, feat_sem, params, category)?.score)
}

/// Back-propagates `d_score` into scorer gradients and `d_feat`.
pub fn semantic_score_backward(
    params: &ScorerParams,
    cache: &ScoreCache,
    d_score: f64,
    grads: &mut ScorerParams,
    d_feat: &mut Grid,
) {
    let (c, k) = (params.channels, cache.category);
    let dz = d_score * cache.score * (1.0 - cache.score);
    grads.bias[k] += dz;
    outer_acc(&mut grads.weights[k * c..(k + 1) * c], &[dz], &cache.pooled);
    let mut d_pooled = vec![0.0; c];
    matvec_t_acc(&params.weights[k * c..(k + 1) * c], &[dz], &mut d_pooled);
    let n = cache.active.len() as f64;
    for &i in &cache.active {
        for (d, g) in d_feat.at_mut(i).iter_mut().zip(&d_pooled) {
            *d += g / n;
        }
    }
}

/// Fused confidence `s_iou * s_sem`.
pub fn fuse_scores(s_iou: f64, s_sem: f64) -> f64 {
    s_iou * s_sem
}

/// How candidates are turned into accepted masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Random batches, best-of-batch above the threshold, coverage pruning.
    Filtered,
    /// Every prompt decoded in order and every nonempty mask kept.
    Dense,
}

/// Which score ranks candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `s_iou * s_sem`.
    Fused,
    /// Decoder quality only; `s_sem` is fixed to 1.
    IouOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GfsConfig {
    /// Acceptance threshold on the fused score.
    pub mask_threshold: f64,
    /// Prompts sampled per iteration.
    pub batch_size: usize,
    pub selection: Selection,
    pub score_mode: ScoreMode,
}

impl Default for GfsConfig {
    fn default() -> Self {
        Self {
            mask_threshold: 0.5,
            batch_size: 16,
            selection: Selection::Filtered,
            score_mode: ScoreMode::Fused,
        }
    }
}

impl GfsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(config_err!("mask threshold {} outside [0, 1]", self.mask_threshold));
        }
        Ok(())
    }
}

/// Accepted masks of one category and loop statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMaskSet {
    pub category: usize,
    pub accepted: Vec<ScoredMask>,
    /// Prompt that produced each accepted mask.
    pub origins: Vec<PointPrompt>,
    pub decoder_calls: usize,
    pub iterations: usize,
    /// Fused score of every nonempty candidate, in decode order.
    pub candidate_scores: Vec<f64>,
}

fn score_candidates<D: PromptDecoder + ?Sized>(
    feat_geo: &DenseFeature,
    feat_sem: &DenseFeature,
    batch: &[PointPrompt],
    decoder: &mut D,
    scorer: &ScorerParams,
    cfg: &GfsConfig,
    category: usize,
) -> Result<Vec<Option<ScoredMask>>> {
    let decoded = decoder.decode(feat_geo, batch)?;
    if decoded.len() != batch.len() {
        return Err(usage_err!(
            "decoder returned {} masks for {} prompts",
            decoded.len(),
            batch.len()
        ));
    }
    decoded
        .into_iter()
        .map(|d| {
            if !(0.0..=1.0).contains(&d.score) {
                return Err(usage_err!("decoder score {} outside [0, 1]", d.score));
            }
            if d.mask.is_empty() {
                return Ok(None);
            }
            let s_sem = match cfg.score_mode {
                ScoreMode::Fused => semantic_score(&d.mask, feat_sem, scorer, category)?,
                ScoreMode::IouOnly => 1.0,
            };
            ScoredMask::new(d.mask, d.score, s_sem, category).map(Some)
        })
        .collect()
}

/// Runs the decode / score / select / prune loop for one category.
pub fn decode_category<D: PromptDecoder + ?Sized>(
    feat_geo: &DenseFeature,
    feat_sem: &DenseFeature,
    prompts: &PromptSet,
    decoder: &mut D,
    scorer: &ScorerParams,
    cfg: &GfsConfig,
    rng: &mut RngHandle,
) -> Result<CategoryMaskSet> {
    cfg.validate()?;
    feat_geo.expect_source(Branch::Geometric)?;
    feat_sem.expect_source(Branch::Semantic)?;
    let category = prompts.category;
    if let Some(p) = prompts.prompts.iter().find(|p| p.category != category) {
        return Err(usage_err!(
            "prompt of category {} in the set of category {category}",
            p.category
        ));
    }
    let mut out = CategoryMaskSet {
        category,
        ..Default::default()
    };

    if cfg.selection == Selection::Dense {
        for batch in prompts.prompts.chunks(cfg.batch_size) {
            out.iterations += 1;
            out.decoder_calls += batch.len();
            let scored = score_candidates(feat_geo, feat_sem, batch, decoder, scorer, cfg, category)?;
            for (prompt, cand) in batch.iter().zip(scored) {
                if let Some(m) = cand {
                    out.candidate_scores.push(m.fused());
                    out.accepted.push(m);
                    out.origins.push(*prompt);
                }
            }
        }
        return Ok(out);
    }

    let mut pool = prompts.prompts.clone();
    while !pool.is_empty() {
        out.iterations += 1;
        let picks = rng.sample_indices(pool.len(), cfg.batch_size);
        let batch: Vec<PointPrompt> = picks.iter().map(|&i| pool[i]).collect();
        out.decoder_calls += batch.len();
        let scored = score_candidates(feat_geo, feat_sem, &batch, decoder, scorer, cfg, category)?;

        let mut best: Option<(usize, ScoredMask)> = None;
        for (r, cand) in scored.into_iter().enumerate() {
            let Some(m) = cand else { continue };
            out.candidate_scores.push(m.fused());
            if best.as_ref().is_none_or(|(_, b)| m.fused() > b.fused()) {
                best = Some((r, m));
            }
        }

        let mut taken = vec![false; pool.len()];
        for &i in &picks {
            taken[i] = true;
        }
        let mut index = 0;
        pool.retain(|_| {
            index += 1;
            !taken[index - 1]
        });

        if let Some((r, m)) = best {
            if m.fused() > cfg.mask_threshold {
                pool.retain(|p| !m.mask().get(p.y, p.x));
                out.origins.push(batch[r]);
                out.accepted.push(m);
            }
        }
    }
    Ok(out)
}

/// Per-category response maps `max_m fused_m * mask_m(u, v)`, with a constant
/// background channel equal to `bg_threshold`, labelled by argmax.
pub fn aggregate(
    sets: &[CategoryMaskSet],
    num_classes: usize,
    height: usize,
    width: usize,
    bg_threshold: f64,
) -> Result<SegmentationResult> {
    let n = height * width;
    let mut response = vec![0.0; num_classes * n];
    response[..n].iter_mut().for_each(|v| *v = bg_threshold);
    for set in sets {
        if set.category == BACKGROUND || set.category >= num_classes {
            return Err(usage_err!(
                "mask set for category {} cannot be aggregated over {num_classes} classes",
                set.category
            ));
        }
        let channel = &mut response[set.category * n..(set.category + 1) * n];
        for m in &set.accepted {
            if m.mask().height() != height || m.mask().width() != width {
                return Err(usage_err!("accepted mask does not match {height}x{width}"));
            }
            let f = m.fused();
            for i in m.mask().ones() {
                if f > channel[i] {
                    channel[i] = f;
                }
            }
        }
    }
    SegmentationResult::from_response(num_classes, height, width, response, bg_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sem_feat(rows: usize, cols: usize, c: usize, stride: usize) -> DenseFeature {
        let mut rng = RngHandle::new(1, 1);
        DenseFeature {
            values: Grid::from_vec(rows, cols, c, (0..rows * cols * c).map(|_| rng.normal()).collect())
                .unwrap(),
            stride,
            source: Branch::Semantic,
        }
    }

    #[test]
    fn zero_scorer_gives_half() {
        let f = sem_feat(2, 2, 3, 2);
        let mut p = ScorerParams::init(3, 2, &mut RngHandle::new(0, 0));
        p.weights.iter_mut().for_each(|w| *w = 0.0);
        p.bias.iter_mut().for_each(|b| *b = 0.0);
        let m = BitMask::from_fn(4, 4, |r, _| r == 0);
        assert_eq!(semantic_score(&m, &f, &p, 1).unwrap(), 0.5);
        p.bias[1] = 10.0;
        assert!(semantic_score(&m, &f, &p, 1).unwrap() > 0.999);
    }

    #[test]
    fn projection_threshold_and_fallback() {
        let f = sem_feat(2, 2, 3, 2);
        // 3 of 4 pixels of cell 0 and 1 of 4 of cell 3
        let m = BitMask::from_fn(4, 4, |r, c| (r < 2 && c < 2 && !(r == 1 && c == 1)) || (r == 3 && c == 3));
        assert_eq!(project_mask(&m, &f).unwrap(), vec![0]);
        // exactly half is not enough; fallback picks the fullest cell
        let m = BitMask::from_fn(4, 4, |r, c| (r == 0 && c < 2) || (r == 2 && c == 3));
        assert_eq!(project_mask(&m, &f).unwrap(), vec![0]);
        assert!(project_mask(&BitMask::new(4, 4), &f).is_err());
        assert!(project_mask(&BitMask::new(3, 4), &f).is_err());
    }

    #[test]
    fn fusion_is_a_product() {
        assert_eq!(fuse_scores(1.0, 1.0), 1.0);
        assert!((fuse_scores(0.8, 0.5) - 0.4).abs() < 1e-15);
        assert_eq!(fuse_scores(0.37, 0.0), 0.0);
    }

    fn set_of(category: usize, masks: Vec<(BitMask, f64)>) -> CategoryMaskSet {
        CategoryMaskSet {
            category,
            accepted: masks
                .into_iter()
                .map(|(m, s)| ScoredMask::new(m, s, 1.0, category).unwrap())
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn aggregation_takes_the_max() {
        let a = BitMask::from_fn(2, 2, |r, _| r == 0);
        let b = BitMask::from_fn(2, 2, |_, c| c == 0);
        let r = aggregate(&[set_of(1, vec![(a, 0.9), (b, 0.6)])], 2, 2, 2, 0.05).unwrap();
        assert_eq!(r.channel(1), &[0.9, 0.9, 0.6, 0.0]);
        assert_eq!(r.labels.as_slice(), &[1, 1, 1, 0]);
    }

    #[test]
    fn nothing_accepted_is_background() {
        let r = aggregate(&[set_of(1, vec![]), set_of(2, vec![])], 3, 4, 4, 0.05).unwrap();
        assert!(r.labels.as_slice().iter().all(|&l| l == 0));
        assert!(aggregate(&[set_of(0, vec![])], 3, 4, 4, 0.05).is_err());
    }
}

//! End-to-end training of the adapters and heads under frozen encoders.
//!
//! A step runs prompt generation and the feedback loop without gradients to
//! decide which masks are accepted, then recomputes the response maps of that
//! fixed selection differentiably: toy-decoder masks enter as pixel
//! probabilities, oracle masks as constants. The loss is
//! `CE + Dice` on the softmax of the response maps plus `alpha_loss` times the
//! pattern-map loss.
//!
//! The selection during training uses its own acceptance threshold (0 by
//! default): with the inference threshold, correct candidates whose scores
//! have dropped below it would receive no gradient and could never recover.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{DecoderKind, EncoderCache, ToyDecoderCache, ToyPromptDecoder};
use crate::error::{usage_err, Error, Result};
use crate::gfs::{self, GfsConfig, ScoreCache, ScoreMode};
use crate::loss::{self, LossConfig};
use crate::mask::{BitMask, LabelMap};
use crate::math;
use crate::model::{Model, TrainableParams};
use crate::optim::{AdamW, OptimConfig};
use crate::params::Parameters;
use crate::prompt;
use crate::rng::{RngHandle, RngState};
use crate::tensor::Grid;
use crate::types::{Branch, DenseFeature, ImageTensor, PatternMap, PointPrompt, BACKGROUND};

/// An accepted mask and the prompt that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub category: usize,
    pub origin: PointPrompt,
    pub mask: BitMask,
    /// Decoder quality at selection time (used as a constant for the oracle).
    pub s_iou: f64,
}

/// Losses of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub seg: f64,
    pub aux: f64,
    pub total: f64,
}

/// Loss value, gradients and the selection they were computed for.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub record: LossRecord,
    pub grads: TrainableParams,
    pub selection: Vec<Selected>,
}

/// Settings of a training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optim: OptimConfig,
    /// Fused-score threshold applied when selecting masks during training.
    pub mask_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            mask_threshold: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optim.validate()?;
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(crate::error::config_err!(
                "training mask threshold {} outside [0, 1]",
                self.mask_threshold
            ));
        }
        Ok(())
    }
}

/// Forward state shared by selection and the differentiable pass.
struct Forward {
    sem: DenseFeature,
    sem_cache: EncoderCache,
    geo: DenseFeature,
    geo_cache: EncoderCache,
    maps: PatternMap,
}

fn forward(model: &Model, image: &ImageTensor) -> Result<Forward> {
    image.check_stride(model.stride())?;
    let p = &model.params;
    let stride = model.stride();
    let (sem_values, sem_cache) = model.semantic_encoder().forward_cached(image, &p.semantic_adapters)?;
    let (geo_values, geo_cache) = model.geometric_encoder().forward_cached(image, &p.geometric_adapters)?;
    let sem = DenseFeature {
        values: sem_values,
        stride,
        source: Branch::Semantic,
    };
    let geo = DenseFeature {
        values: geo_values,
        stride,
        source: Branch::Geometric,
    };
    let maps = prompt::pattern_maps(&sem, &p.prompt_head)?;
    Ok(Forward {
        sem,
        sem_cache,
        geo,
        geo_cache,
        maps,
    })
}

fn select(
    model: &Model,
    fwd: &Forward,
    labels: &LabelMap,
    mask_threshold: f64,
    rng: &mut RngHandle,
) -> Result<Vec<Selected>> {
    let mut decoder = model.decoder(Some(labels), rng)?;
    let gfs_cfg = GfsConfig {
        mask_threshold,
        ..model.cfg.gfs
    };
    let pred = model.segment_with(&fwd.sem, &fwd.geo, decoder.as_mut(), &gfs_cfg, rng)?;
    let mut out = Vec::new();
    for set in pred.sets {
        for (m, origin) in set.accepted.into_iter().zip(set.origins) {
            out.push(Selected {
                category: set.category,
                origin,
                s_iou: m.s_iou(),
                mask: m.mask().clone(),
            });
        }
    }
    Ok(out)
}

/// Runs the non-differentiable selection for `image` with the current parameters.
pub fn selection_for(
    model: &Model,
    image: &ImageTensor,
    labels: &LabelMap,
    mask_threshold: f64,
    rng: &mut RngHandle,
) -> Result<Vec<Selected>> {
    let fwd = forward(model, image)?;
    select(model, &fwd, labels, mask_threshold, rng)
}

struct Candidate {
    decoder_cache: Option<ToyDecoderCache>,
    score_cache: Option<ScoreCache>,
    s_iou: f64,
    s_sem: f64,
}

fn norms_detail(fwd: &Forward, response: &[f64], params: &TrainableParams) -> alloc::string::String {
    format!(
        "|F_sem| = {:.4e}, |F_geo| = {:.4e}, |T| = {:.4e}, |response| = {:.4e}, |params| = {:.4e}",
        fwd.sem.values.norm(),
        fwd.geo.values.norm(),
        math::l2_norm(&fwd.maps.probs),
        math::l2_norm(response),
        math::l2_norm(&params.flatten())
    )
}

fn differentiable(
    model: &Model,
    fwd: &Forward,
    labels: &LabelMap,
    selection: &[Selected],
    cfg: &LossConfig,
) -> Result<(LossRecord, TrainableParams)> {
    cfg.validate()?;
    let p = &model.params;
    let k_all = model.cfg.num_classes;
    let (h, w) = fwd.sem.image_size();
    if labels.height() != h || labels.width() != w {
        return Err(usage_err!("{}x{} labels do not match the {h}x{w} image", labels.height(), labels.width()));
    }
    labels.check_range(k_all)?;
    let n = h * w;
    let toy = model.cfg.decoder == DecoderKind::ToyDecoder;
    let decoder = ToyPromptDecoder::new(&p.decoder);

    let mut cands = Vec::with_capacity(selection.len());
    for s in selection {
        if s.category == BACKGROUND || s.category >= k_all {
            return Err(usage_err!("selected mask has invalid category {}", s.category));
        }
        let (decoder_cache, s_iou) = if toy {
            let c = decoder.forward_cached(&fwd.geo, &s.origin)?;
            let s_iou = c.s_iou;
            (Some(c), s_iou)
        } else {
            (None, s.s_iou)
        };
        let (score_cache, s_sem) = match model.cfg.gfs.score_mode {
            ScoreMode::Fused => {
                let active = gfs::project_mask(&s.mask, &fwd.sem)?;
                let c = gfs::semantic_score_cells(active, &fwd.sem, &p.scorer, s.category)?;
                let v = c.score;
                (Some(c), v)
            }
            ScoreMode::IouOnly => (None, 1.0),
        };
        cands.push(Candidate {
            decoder_cache,
            score_cache,
            s_iou,
            s_sem,
        });
    }
    let value = |m: usize, i: usize| -> f64 {
        match &cands[m].decoder_cache {
            Some(c) => c.probs[i],
            None => f64::from(u8::from(selection[m].mask.get_index(i))),
        }
    };

    let mut response = vec![0.0; k_all * n];
    response[..n].iter_mut().for_each(|v| *v = model.cfg.bg_threshold);
    let mut owner: Vec<Option<usize>> = vec![None; k_all * n];
    for (m, s) in selection.iter().enumerate() {
        let fused = cands[m].s_iou * cands[m].s_sem;
        let base = s.category * n;
        for i in 0..n {
            let v = value(m, i) * fused;
            if owner[base + i].is_none() || v > response[base + i] {
                response[base + i] = v;
                owner[base + i] = Some(m);
            }
        }
    }

    let probs = loss::softmax_channels(&response, k_all);
    let (seg, d_probs) = loss::seg_loss_grad(&probs, labels, k_all, cfg)?;
    let target = prompt::downsample_gt(labels, k_all, model.stride())?;
    let aux = prompt::aux_loss(&fwd.maps, &target)?;
    let total = loss::total_loss(seg, aux, cfg);
    if !total.is_finite() {
        return Err(Error::numeric(
            "loss",
            format!("seg = {seg}, aux = {aux}; {}", norms_detail(fwd, &response, p)),
        ));
    }
    let d_response = loss::softmax_channels_backward(&probs, &d_probs, k_all);

    let mut grads = p.zeros_like();
    let mut d_sem = Grid::zeros(fwd.sem.rows(), fwd.sem.cols(), fwd.sem.channels());
    let mut d_geo = Grid::zeros(fwd.geo.rows(), fwd.geo.cols(), fwd.geo.channels());

    let mut d_value: Vec<Vec<f64>> = cands
        .iter()
        .map(|c| if c.decoder_cache.is_some() { vec![0.0; n] } else { Vec::new() })
        .collect();
    let mut d_fused = vec![0.0; cands.len()];
    for (j, o) in owner.iter().enumerate().skip(n) {
        let Some(m) = *o else { continue };
        let i = j % n;
        let g = d_response[j];
        let fused = cands[m].s_iou * cands[m].s_sem;
        if !d_value[m].is_empty() {
            d_value[m][i] += g * fused;
        }
        d_fused[m] += g * value(m, i);
    }
    for (m, c) in cands.iter().enumerate() {
        if let Some(dc) = &c.decoder_cache {
            decoder.backward(&fwd.geo, dc, &d_value[m], d_fused[m] * c.s_sem, &mut grads.decoder, &mut d_geo);
        }
        if let Some(sc) = &c.score_cache {
            gfs::semantic_score_backward(&p.scorer, sc, d_fused[m] * c.s_iou, &mut grads.scorer, &mut d_sem);
        }
    }

    if cfg.alpha_loss > 0.0 {
        let mut d_maps = prompt::aux_loss_grad(&fwd.maps, &target)?;
        d_maps.iter_mut().for_each(|d| *d *= cfg.alpha_loss);
        let d = prompt::pattern_maps_backward(&fwd.sem, &p.prompt_head, &fwd.maps, &d_maps, &mut grads.prompt_head);
        d_sem.add_assign(&d);
    }

    model
        .semantic_encoder()
        .backward(&fwd.sem_cache, &p.semantic_adapters, &d_sem, &mut grads.semantic_adapters);
    model
        .geometric_encoder()
        .backward(&fwd.geo_cache, &p.geometric_adapters, &d_geo, &mut grads.geometric_adapters);

    let record = LossRecord {
        iteration: 0,
        seg,
        aux,
        total,
    };
    Ok((record, grads))
}

/// Loss and gradients for a fixed selection. With the selection held fixed the
/// loss is a smooth function of the trainable parameters, which is what
/// finite-difference checks need.
pub fn evaluate_with_selection(
    model: &Model,
    image: &ImageTensor,
    labels: &LabelMap,
    selection: &[Selected],
    cfg: &LossConfig,
) -> Result<(LossRecord, TrainableParams)> {
    let fwd = forward(model, image)?;
    differentiable(model, &fwd, labels, selection, cfg)
}

/// Selection followed by the differentiable pass.
pub fn evaluate(
    model: &Model,
    image: &ImageTensor,
    labels: &LabelMap,
    cfg: &TrainConfig,
    rng: &mut RngHandle,
) -> Result<Evaluation> {
    let fwd = forward(model, image)?;
    let selection = select(model, &fwd, labels, cfg.mask_threshold, rng)?;
    let (record, grads) = differentiable(model, &fwd, labels, &selection, &cfg.loss)?;
    Ok(Evaluation {
        record,
        grads,
        selection,
    })
}

/// Serializable training state apart from the model itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub iteration: u64,
    pub optimizer: AdamW,
    pub rng: RngState,
}

/// Optimizer loop over a model.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    optimizer: AdamW,
    rng: RngHandle,
    iteration: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let optimizer = AdamW::new(model.params.num_params());
        Ok(Self {
            model,
            cfg,
            optimizer,
            rng: RngHandle::new(seed, 0x7e),
            iteration: 0,
        })
    }

    /// Restores a trainer from a saved state.
    pub fn resume(model: Model, cfg: TrainConfig, state: TrainerState) -> Result<Self> {
        let mut t = Self::new(model, cfg, 0)?;
        if state.optimizer.m.len() != t.optimizer.m.len() || state.optimizer.v.len() != t.optimizer.v.len() {
            return Err(usage_err!("optimizer state does not match the parameter count"));
        }
        t.optimizer = state.optimizer;
        t.rng = RngHandle::from_state(state.rng);
        t.iteration = state.iteration;
        Ok(t)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            iteration: self.iteration,
            optimizer: self.optimizer.clone(),
            rng: self.rng.state(),
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// One optimizer update on a single image.
    pub fn train_step(&mut self, image: &ImageTensor, labels: &LabelMap) -> Result<LossRecord> {
        self.step_batch(&[(image, labels)])
    }

    /// One update with gradients averaged over `batch`.
    pub fn step_batch(&mut self, batch: &[(&ImageTensor, &LabelMap)]) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(usage_err!("empty training batch"));
        }
        let mut grad = vec![0.0; self.optimizer.m.len()];
        let (mut seg, mut aux, mut total) = (0.0, 0.0, 0.0);
        for (image, labels) in batch {
            let ev = evaluate(&self.model, image, labels, &self.cfg, &mut self.rng)?;
            for (g, v) in grad.iter_mut().zip(ev.grads.flatten()) {
                *g += v;
            }
            seg += ev.record.seg;
            aux += ev.record.aux;
            total += ev.record.total;
        }
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        if !math::all_finite(&grad) {
            return Err(Error::numeric("gradient", format!("non-finite gradient, |g| = {:.4e}", math::l2_norm(&grad))));
        }
        let mut flat = self.model.params.flatten();
        self.optimizer.update(&self.cfg.optim, &mut flat, &grad)?;
        self.model.params.assign_flat(&flat);
        self.iteration += 1;
        Ok(LossRecord {
            iteration: self.iteration,
            seg: seg * scale,
            aux: aux * scale,
            total: total * scale,
        })
    }

    /// One update on `batch_size` samples drawn uniformly from `data`.
    pub fn step_on(&mut self, data: &[(ImageTensor, LabelMap)]) -> Result<LossRecord> {
        if data.is_empty() {
            return Err(usage_err!("no training samples"));
        }
        let picks: Vec<usize> = (0..self.cfg.optim.batch_size).map(|_| self.rng.below(data.len())).collect();
        let batch: Vec<(&ImageTensor, &LabelMap)> = picks.iter().map(|&i| (&data[i].0, &data[i].1)).collect();
        self.step_batch(&batch)
    }
}

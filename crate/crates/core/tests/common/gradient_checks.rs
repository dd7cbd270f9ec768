//! Finite-difference checks of every hand-written backward pass, one seed at a time.
#![allow(dead_code)]

use crate::common::*;
use promptseg_core::adapter::{self, AdapterConfig, AdapterParams, InitScheme};
use promptseg_core::backbone::{DecoderKind, ToyDecoderParams, ToyEncoder, ToyEncoderConfig, ToyPromptDecoder};
use promptseg_core::gfs::{project_mask, semantic_score_backward, semantic_score_cells, ScorerParams};
use promptseg_core::loss::{seg_loss, seg_loss_grad, softmax_channels, softmax_channels_backward, LossConfig};
use promptseg_core::model::{Model, ModelConfig, TrainableParams};
use promptseg_core::params::Parameters;
use promptseg_core::prompt::{aux_loss, aux_loss_grad, pattern_maps, pattern_maps_backward, PromptHeadParams};
use promptseg_core::train::{evaluate_with_selection, selection_for};
use promptseg_core::types::{Branch, DenseFeature, PatternMap, PointPrompt};
use promptseg_core::{BitMask, Grid, RngHandle};

const MODULE_TOL: f64 = 1e-4;
const END_TO_END_TOL: f64 = 1e-3;

fn all(n: usize) -> std::ops::Range<usize> {
    0..n
}

fn randomized<P: Parameters + Clone>(p: &P, rng: &mut RngHandle, std: f64) -> P {
    let mut out = p.clone();
    out.assign_flat(&gaussian(rng, p.num_params(), std));
    out
}

fn adapter_params(rng: &mut RngHandle, c: usize) -> AdapterParams {
    let cfg = AdapterConfig {
        bottleneck_ratio: 0.5,
        init_scheme: InitScheme::SmallGaussian,
    };
    let p = AdapterParams::init(c, &cfg, rng).unwrap();
    randomized(&p, rng, 0.5)
}

pub fn adapter_gradients(seed: u64) {
    let mut rng = RngHandle::new(seed, 1);
    let c = 4;
    let params = adapter_params(&mut rng, c);
    let x = grid(&mut rng, 3, 3, c);
    let r = grid(&mut rng, 3, 3, c);
    let loss = |p: &AdapterParams, x: &Grid| dot(adapter::forward_cached(x, p).unwrap().0.data(), r.data());

    let (_, cache) = adapter::forward_cached(&x, &params).unwrap();
    let mut grads = params.zeros_like();
    let d_x = adapter::backward(&params, &cache, &r, &mut grads);

    let flat = params.flatten();
    check_gradient("adapter params", &flat, &grads.flatten(), all(flat.len()), MODULE_TOL, |v| {
        let mut p = params.clone();
        p.assign_flat(v);
        loss(&p, &x)
    });
    check_gradient("adapter input", x.data(), d_x.data(), all(x.data().len()), MODULE_TOL, |v| {
        loss(&params, &Grid::from_vec(3, 3, c, v.to_vec()).unwrap())
    });
}

pub fn prompt_head_gradients_through_aux_loss(seed: u64) {
    let mut rng = RngHandle::new(seed, 2);
    let (c, k) = (5, 3);
    let params = randomized(&PromptHeadParams::init(c, k, &mut rng), &mut rng, 0.5);
    let feat = feature(&mut rng, 3, 3, c, 4, Branch::Semantic);
    let mut target = vec![0.0; k * 9];
    for i in 0..9 {
        target[rng.below(k) * 9 + i] = 1.0;
    }
    let target = PatternMap::new(k, 3, 3, target).unwrap();
    let loss = |p: &PromptHeadParams, f: &DenseFeature| aux_loss(&pattern_maps(f, p).unwrap(), &target).unwrap();

    let maps = pattern_maps(&feat, &params).unwrap();
    let d_maps = aux_loss_grad(&maps, &target).unwrap();
    let mut grads = params.zeros_like();
    let d_feat = pattern_maps_backward(&feat, &params, &maps, &d_maps, &mut grads);

    let flat = params.flatten();
    check_gradient("prompt head", &flat, &grads.flatten(), all(flat.len()), MODULE_TOL, |v| {
        let mut p = params.clone();
        p.assign_flat(v);
        loss(&p, &feat)
    });
    let x = feat.values.data();
    check_gradient("prompt head input", x, d_feat.data(), all(x.len()), MODULE_TOL, |v| {
        let mut f = feat.clone();
        f.values.data_mut().copy_from_slice(v);
        loss(&params, &f)
    });
}

pub fn scorer_gradients(seed: u64) {
    let mut rng = RngHandle::new(seed, 3);
    let (c, k, s) = (6, 3, 4);
    let params = randomized(&ScorerParams::init(c, k, &mut rng), &mut rng, 0.5);
    let feat = feature(&mut rng, 3, 3, c, s, Branch::Semantic);
    let mask = loop {
        let m = BitMask::from_fn(12, 12, |_, _| rng.uniform() < 0.4);
        if !m.is_empty() {
            break m;
        }
    };
    let category = 1 + rng.below(k - 1);
    let active = project_mask(&mask, &feat).unwrap();
    let score = |p: &ScorerParams, f: &DenseFeature| semantic_score_cells(active.clone(), f, p, category).unwrap().score;

    let cache = semantic_score_cells(active.clone(), &feat, &params, category).unwrap();
    let mut grads = params.zeros_like();
    let mut d_feat = Grid::zeros(3, 3, c);
    semantic_score_backward(&params, &cache, 1.0, &mut grads, &mut d_feat);

    let flat = params.flatten();
    check_gradient("scorer", &flat, &grads.flatten(), all(flat.len()), MODULE_TOL, |v| {
        let mut p = params.clone();
        p.assign_flat(v);
        score(&p, &feat)
    });
    let x = feat.values.data();
    check_gradient("scorer input", x, d_feat.data(), all(x.len()), MODULE_TOL, |v| {
        let mut f = feat.clone();
        f.values.data_mut().copy_from_slice(v);
        score(&params, &f)
    });
}

pub fn segmentation_loss_gradients(seed: u64) {
    let mut rng = RngHandle::new(seed, 4);
    let (h, w, k) = (4, 4, 3);
    let labels = labels(&mut rng, h, w, k);
    let cfg = LossConfig::default();
    let logits = gaussian(&mut rng, k * h * w, 1.0);
    let probs = softmax_channels(&logits, k);

    let (value, d_probs) = seg_loss_grad(&probs, &labels, k, &cfg).unwrap();
    assert_eq!(value, seg_loss(&probs, &labels, k, &cfg).unwrap());
    check_gradient("seg loss", &probs, &d_probs, all(probs.len()), MODULE_TOL, |p| {
        seg_loss(p, &labels, k, &cfg).unwrap()
    });

    let d_logits = softmax_channels_backward(&probs, &d_probs, k);
    check_gradient("softmax + seg loss", &logits, &d_logits, all(logits.len()), MODULE_TOL, |z| {
        seg_loss(&softmax_channels(z, k), &labels, k, &cfg).unwrap()
    });
}

pub fn toy_decoder_gradients(seed: u64) {
    let mut rng = RngHandle::new(seed, 5);
    let (c, dim, s) = (6, 4, 4);
    let params = randomized(&ToyDecoderParams::init(c, dim, &mut rng).unwrap(), &mut rng, 0.5);
    let feat = feature(&mut rng, 4, 4, c, s, Branch::Geometric);
    let prompt = PointPrompt::at_cell(rng.below(4), rng.below(4), s, 1);
    let r = gaussian(&mut rng, 16 * 16, 1.0);
    let ws = rng.normal();
    let loss = |p: &ToyDecoderParams, f: &DenseFeature| {
        let cache = ToyPromptDecoder::new(p).forward_cached(f, &prompt).unwrap();
        dot(&cache.probs, &r) + ws * cache.s_iou
    };

    let dec = ToyPromptDecoder::new(&params);
    let cache = dec.forward_cached(&feat, &prompt).unwrap();
    let mut grads = params.zeros_like();
    let mut d_feat = Grid::zeros(4, 4, c);
    dec.backward(&feat, &cache, &r, ws, &mut grads, &mut d_feat);

    let flat = params.flatten();
    check_gradient("toy decoder", &flat, &grads.flatten(), all(flat.len()), MODULE_TOL, |v| {
        let mut p = params.clone();
        p.assign_flat(v);
        loss(&p, &feat)
    });
    let x = feat.values.data();
    check_gradient("toy decoder input", x, d_feat.data(), all(x.len()), MODULE_TOL, |v| {
        let mut f = feat.clone();
        f.values.data_mut().copy_from_slice(v);
        loss(&params, &f)
    });
}

pub fn encoder_gradients_reach_every_adapter(seed: u64) {
    let mut rng = RngHandle::new(seed, 6);
    let cfg = ToyEncoderConfig {
        stride: 4,
        channels: 6,
        blocks: 2,
        hidden_mult: 2,
    };
    let enc = ToyEncoder::new(cfg, seed).unwrap();
    let adapters: Vec<_> = (0..2).map(|_| adapter_params(&mut rng, 6)).collect();
    let img = image(&mut rng, 12, 12);
    let r = grid(&mut rng, 3, 3, 6);
    let loss = |a: &[AdapterParams]| dot(enc.forward_cached(&img, a).unwrap().0.data(), r.data());

    let (_, cache) = enc.forward_cached(&img, &adapters).unwrap();
    let mut grads: Vec<_> = adapters.iter().map(AdapterParams::zeros_like).collect();
    enc.backward(&cache, &adapters, &r, &mut grads);

    for b in 0..2 {
        let flat = adapters[b].flatten();
        check_gradient(&format!("encoder adapter {b}"), &flat, &grads[b].flatten(), all(flat.len()), MODULE_TOL, |v| {
            let mut a = adapters.clone();
            a[b].assign_flat(v);
            loss(&a)
        });
    }
}

fn e2e_model(seed: u64, decoder: DecoderKind) -> Model {
    let cfg = ModelConfig {
        encoder: ToyEncoderConfig {
            stride: 7,
            channels: 8,
            blocks: 2,
            hidden_mult: 2,
        },
        encoder_seed: seed,
        adapter: AdapterConfig {
            bottleneck_ratio: 0.25,
            init_scheme: InitScheme::SmallGaussian,
        },
        decoder,
        decoder_dim: 4,
        ..Default::default()
    };
    let base = TrainableParams::init(&cfg, seed).unwrap();
    let mut rng = RngHandle::new(seed, 7);
    let mut flat = base.flatten();
    for v in &mut flat {
        *v += 0.1 * rng.normal();
    }
    let mut params = base;
    params.assign_flat(&flat);
    Model::from_params(cfg, params).unwrap()
}

/// Checks a few coordinates of every trainable tensor; returns whether any mask was selected.
pub fn end_to_end(decoder: DecoderKind, seed: u64) -> bool {
    let mut rng = RngHandle::new(seed, 8);
    let model = e2e_model(seed, decoder);
    let img = image(&mut rng, 28, 28);
    let labels = rect_labels(28, 28, &[(1, 2, 2, 12, 14), (2, 15, 10, 26, 25)]);
    let cfg = LossConfig::default();
    let selection = selection_for(&model, &img, &labels, 0.0, &mut rng).unwrap();
    let (record, grads) = evaluate_with_selection(&model, &img, &labels, &selection, &cfg).unwrap();
    let loss_at = |v: &[f64]| {
        let mut m = model.clone();
        m.params.assign_flat(v);
        evaluate_with_selection(&m, &img, &labels, &selection, &cfg).unwrap().0.total
    };
    let flat = model.params.flatten();
    assert_eq!(loss_at(&flat), record.total);

    let mut which = Vec::new();
    let mut offset = 0;
    for t in model.params.named() {
        for _ in 0..3 {
            which.push(offset + rng.below(t.data.len()));
        }
        offset += t.data.len();
    }
    check_gradient(&format!("end to end ({})", decoder.name()), &flat, &grads.flatten(), which, END_TO_END_TOL, loss_at);
    !selection.is_empty()
}


pub const MODULE_CHECKS: &[(&str, fn(u64))] = &[
    ("adapter", adapter_gradients),
    ("prompt head", prompt_head_gradients_through_aux_loss),
    ("scorer", scorer_gradients),
    ("segmentation loss", segmentation_loss_gradients),
    ("toy decoder", toy_decoder_gradients),
    ("encoder adapters", encoder_gradients_reach_every_adapter),
];

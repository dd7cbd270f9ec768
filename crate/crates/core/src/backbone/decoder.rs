use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{check_decode_batch, DecodedMask, PromptDecoder};
use crate::error::{config_err, Result};
use crate::mask::BitMask;
use crate::math::{self, dot, matvec, matvec_t_acc, outer_acc, sigmoid};
use crate::params::{tensor, NamedTensor, Parameters};
use crate::rng::RngHandle;
use crate::tensor::Grid;
use crate::types::{DenseFeature, PointPrompt};

/// Trainable head of the toy promptable decoder.
///
/// Features `g` are first centered on their mean over the grid. For a prompt
/// in cell `p`, the query is `q = Wq g_p + bq`. Every cell gets
/// the mask logit `q . (Wk g_c) / sqrt(d) + mask_bias - pos_decay * |c - p|`
/// (distance in cells from the prompt position). Cell logits are bilinearly
/// upsampled to pixels; the mask is `logit > 0`. The quality score is
/// `sigmoid(iou_w . q + iou_b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDecoderParams {
    pub channels: usize,
    pub dim: usize,
    /// `dim x channels`
    pub w_q: Vec<f64>,
    pub b_q: Vec<f64>,
    /// `dim x channels`
    pub w_k: Vec<f64>,
    pub mask_bias: f64,
    pub pos_decay: f64,
    pub iou_w: Vec<f64>,
    pub iou_b: f64,
}

impl ToyDecoderParams {
    /// Query and key projections start tied so that initial masks favour cells
    /// whose features resemble the prompt cell.
    pub fn init(channels: usize, dim: usize, rng: &mut RngHandle) -> Result<Self> {
        if channels == 0 || dim == 0 {
            return Err(config_err!("decoder needs positive channels and dim"));
        }
        let std = 1.0 / math::sqrt(channels as f64);
        let w_q: Vec<f64> = (0..dim * channels).map(|_| std * rng.normal()).collect();
        Ok(Self {
            channels,
            dim,
            w_k: w_q.clone(),
            w_q,
            b_q: vec![0.0; dim],
            mask_bias: 0.0,
            pos_decay: 0.0,
            iou_w: vec![0.0; dim],
            // starts near 0.9 so early candidates clear the mask threshold
            iou_b: 2.2,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            channels: self.channels,
            dim: self.dim,
            w_q: vec![0.0; self.w_q.len()],
            b_q: vec![0.0; self.dim],
            w_k: vec![0.0; self.w_k.len()],
            mask_bias: 0.0,
            pos_decay: 0.0,
            iou_w: vec![0.0; self.dim],
            iou_b: 0.0,
        }
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let (c, d) = (self.channels, self.dim);
        if c != channels
            || self.w_q.len() != d * c
            || self.w_k.len() != d * c
            || self.b_q.len() != d
            || self.iou_w.len() != d
        {
            return Err(config_err!(
                "decoder tensors do not match {channels} feature channels"
            ));
        }
        Ok(())
    }
}

impl Parameters for ToyDecoderParams {
    fn named(&self) -> Vec<NamedTensor<'_>> {
        let (c, d) = (self.channels, self.dim);
        vec![
            tensor("query_weights", &[d, c], &self.w_q),
            tensor("query_bias", &[d], &self.b_q),
            tensor("key_weights", &[d, c], &self.w_k),
            tensor("mask_bias", &[1], core::slice::from_ref(&self.mask_bias)),
            tensor("pos_decay", &[1], core::slice::from_ref(&self.pos_decay)),
            tensor("iou_weights", &[d], &self.iou_w),
            tensor("iou_bias", &[1], core::slice::from_ref(&self.iou_b)),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            core::slice::from_mut(&mut self.mask_bias),
            core::slice::from_mut(&mut self.pos_decay),
            &mut self.iou_w,
            core::slice::from_mut(&mut self.iou_b),
        ]
    }
}

/// Bilinear sampling positions from cell centers to pixel centers, per axis.
#[derive(Clone, Debug)]
struct AxisTable {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w: Vec<f64>,
}

impl AxisTable {
    fn new(cells: usize, stride: usize) -> Self {
        let n = cells * stride;
        let mut t = AxisTable {
            lo: Vec::with_capacity(n),
            hi: Vec::with_capacity(n),
            w: Vec::with_capacity(n),
        };
        for p in 0..n {
            let g = ((p as f64 + 0.5) / stride as f64 - 0.5).clamp(0.0, (cells - 1) as f64);
            let lo = math::floor(g) as usize;
            t.lo.push(lo);
            t.hi.push((lo + 1).min(cells - 1));
            t.w.push(g - lo as f64);
        }
        t
    }
}

/// Bilinear upsampler from a cell grid to pixel resolution.
#[derive(Clone, Debug)]
pub(crate) struct Upsampler {
    rows: usize,
    cols: usize,
    ys: AxisTable,
    xs: AxisTable,
}

impl Upsampler {
    pub(crate) fn new(rows: usize, cols: usize, stride: usize) -> Self {
        Self {
            rows,
            cols,
            ys: AxisTable::new(rows, stride),
            xs: AxisTable::new(cols, stride),
        }
    }

    fn height(&self) -> usize {
        self.ys.w.len()
    }

    fn width(&self) -> usize {
        self.xs.w.len()
    }

    /// Calls `f(pixel_index, value)` for every upsampled pixel.
    fn for_each(&self, cells: &[f64], mut f: impl FnMut(usize, f64)) {
        let mut tmp = vec![0.0; self.cols];
        let w = self.width();
        for y in 0..self.height() {
            let (lo, hi, wy) = (self.ys.lo[y], self.ys.hi[y], self.ys.w[y]);
            for (c, t) in tmp.iter_mut().enumerate() {
                *t = (1.0 - wy) * cells[lo * self.cols + c] + wy * cells[hi * self.cols + c];
            }
            for x in 0..w {
                let v = (1.0 - self.xs.w[x]) * tmp[self.xs.lo[x]] + self.xs.w[x] * tmp[self.xs.hi[x]];
                f(y * w + x, v);
            }
        }
    }

    pub(crate) fn upsample(&self, cells: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.height() * self.width()];
        self.for_each(cells, |i, v| out[i] = v);
        out
    }

    fn threshold(&self, cells: &[f64]) -> BitMask {
        let mut mask = BitMask::new(self.height(), self.width());
        self.for_each(cells, |i, v| {
            if v > 0.0 {
                mask.set_index(i, true);
            }
        });
        mask
    }

    /// Adjoint of [`Upsampler::upsample`].
    pub(crate) fn transpose(&self, d_pixels: &[f64]) -> Vec<f64> {
        let mut d_cells = vec![0.0; self.rows * self.cols];
        let mut tmp = vec![0.0; self.cols];
        let w = self.width();
        for y in 0..self.height() {
            tmp.iter_mut().for_each(|t| *t = 0.0);
            for x in 0..w {
                let g = d_pixels[y * w + x];
                tmp[self.xs.lo[x]] += (1.0 - self.xs.w[x]) * g;
                tmp[self.xs.hi[x]] += self.xs.w[x] * g;
            }
            let (lo, hi, wy) = (self.ys.lo[y], self.ys.hi[y], self.ys.w[y]);
            for (c, &t) in tmp.iter().enumerate() {
                d_cells[lo * self.cols + c] += (1.0 - wy) * t;
                d_cells[hi * self.cols + c] += wy * t;
            }
        }
        d_cells
    }
}

/// Trainable promptable decoder over geometric features.
#[derive(Clone, Debug)]
pub struct ToyPromptDecoder<'a> {
    params: &'a ToyDecoderParams,
}

/// Intermediates of one differentiable decode.
#[derive(Clone, Debug)]
pub struct ToyDecoderCache {
    prompt_cell: usize,
    centered: Grid,
    keys: Grid,
    query: Vec<f64>,
    dists: Vec<f64>,
    /// Pixel probabilities `sigmoid(upsampled logits)`.
    pub probs: Vec<f64>,
    pub s_iou: f64,
}

impl<'a> ToyPromptDecoder<'a> {
    pub fn new(params: &'a ToyDecoderParams) -> Self {
        Self { params }
    }

    /// Features minus their mean over the grid.
    fn centered(feat: &DenseFeature) -> Grid {
        let g = &feat.values;
        let mut mean = vec![0.0; g.channels()];
        for i in 0..g.cells() {
            for (m, v) in mean.iter_mut().zip(g.at(i)) {
                *m += v;
            }
        }
        let n = g.cells() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let mut out = g.clone();
        for i in 0..out.cells() {
            for (o, m) in out.at_mut(i).iter_mut().zip(&mean) {
                *o -= m;
            }
        }
        out
    }

    fn keys(&self, centered: &Grid) -> Grid {
        let p = self.params;
        let mut keys = Grid::zeros(centered.rows(), centered.cols(), p.dim);
        for i in 0..centered.cells() {
            matvec(&p.w_k, centered.at(i), keys.at_mut(i));
        }
        keys
    }

    fn prompt_position(feat: &DenseFeature, prompt: &PointPrompt) -> (usize, f64, f64) {
        let s = feat.stride as f64;
        let cell = (prompt.y / feat.stride) * feat.cols() + prompt.x / feat.stride;
        let gy = (prompt.y as f64 + 0.5) / s - 0.5;
        let gx = (prompt.x as f64 + 0.5) / s - 0.5;
        (cell, gy, gx)
    }

    fn distances(feat: &DenseFeature, gy: f64, gx: f64) -> Vec<f64> {
        let cols = feat.cols();
        (0..feat.values.cells())
            .map(|i| {
                let (r, c) = ((i / cols) as f64, (i % cols) as f64);
                math::sqrt((r - gy) * (r - gy) + (c - gx) * (c - gx))
            })
            .collect()
    }

    /// Query vector, cell logits and distances for one prompt.
    fn cell_logits(
        &self,
        feat: &DenseFeature,
        centered: &Grid,
        keys: &Grid,
        prompt: &PointPrompt,
    ) -> (usize, Vec<f64>, Vec<f64>, Vec<f64>) {
        let p = self.params;
        let (cell, gy, gx) = Self::prompt_position(feat, prompt);
        let mut query = vec![0.0; p.dim];
        matvec(&p.w_q, centered.at(cell), &mut query);
        for (q, b) in query.iter_mut().zip(&p.b_q) {
            *q += b;
        }
        let scale = 1.0 / math::sqrt(p.dim as f64);
        let dists = Self::distances(feat, gy, gx);
        let logits = (0..keys.cells())
            .map(|i| scale * dot(&query, keys.at(i)) + p.mask_bias - p.pos_decay * dists[i])
            .collect();
        (cell, query, logits, dists)
    }

    fn score(&self, query: &[f64]) -> f64 {
        sigmoid(dot(&self.params.iou_w, query) + self.params.iou_b)
    }

    /// Differentiable decode of one prompt: pixel probabilities plus cache.
    pub fn forward_cached(&self, feat: &DenseFeature, prompt: &PointPrompt) -> Result<ToyDecoderCache> {
        self.params.validate(feat.channels())?;
        check_decode_batch(feat, core::slice::from_ref(prompt))?;
        let centered = Self::centered(feat);
        let keys = self.keys(&centered);
        let (prompt_cell, query, logits, dists) = self.cell_logits(feat, &centered, &keys, prompt);
        let up = Upsampler::new(feat.rows(), feat.cols(), feat.stride);
        let probs = up.upsample(&logits).into_iter().map(sigmoid).collect();
        let s_iou = self.score(&query);
        Ok(ToyDecoderCache {
            prompt_cell,
            centered,
            keys,
            query,
            dists,
            probs,
            s_iou,
        })
    }

    /// Back-propagates gradients w.r.t. pixel probabilities and the quality
    /// score. Parameter gradients go to `grads`, feature gradients to `d_feat`.
    pub fn backward(
        &self,
        feat: &DenseFeature,
        cache: &ToyDecoderCache,
        d_probs: &[f64],
        d_score: f64,
        grads: &mut ToyDecoderParams,
        d_feat: &mut Grid,
    ) {
        let p = self.params;
        let up = Upsampler::new(feat.rows(), feat.cols(), feat.stride);
        let d_up: Vec<f64> = d_probs
            .iter()
            .zip(&cache.probs)
            .map(|(g, pr)| g * pr * (1.0 - pr))
            .collect();
        let d_logits = up.transpose(&d_up);
        let mut d_centered = Grid::zeros(feat.rows(), feat.cols(), feat.channels());
        let scale = 1.0 / math::sqrt(p.dim as f64);
        let mut d_query = vec![0.0; p.dim];
        let mut d_key = vec![0.0; p.dim];
        for (i, &g) in d_logits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.mask_bias += g;
            grads.pos_decay -= g * cache.dists[i];
            for ((dq, dk), (&k, &q)) in d_query
                .iter_mut()
                .zip(d_key.iter_mut())
                .zip(cache.keys.at(i).iter().zip(&cache.query))
            {
                *dq += scale * g * k;
                *dk = scale * g * q;
            }
            outer_acc(&mut grads.w_k, &d_key, cache.centered.at(i));
            matvec_t_acc(&p.w_k, &d_key, d_centered.at_mut(i));
        }
        let s = cache.s_iou;
        let dz = d_score * s * (1.0 - s);
        grads.iou_b += dz;
        for ((gw, dq), (&q, &w)) in grads
            .iou_w
            .iter_mut()
            .zip(d_query.iter_mut())
            .zip(cache.query.iter().zip(&p.iou_w))
        {
            *gw += dz * q;
            *dq += dz * w;
        }
        outer_acc(&mut grads.w_q, &d_query, cache.centered.at(cache.prompt_cell));
        for (gb, dq) in grads.b_q.iter_mut().zip(&d_query) {
            *gb += dq;
        }
        matvec_t_acc(&p.w_q, &d_query, d_centered.at_mut(cache.prompt_cell));
        let mut mean = vec![0.0; d_centered.channels()];
        for i in 0..d_centered.cells() {
            for (m, v) in mean.iter_mut().zip(d_centered.at(i)) {
                *m += v;
            }
        }
        let n = d_centered.cells() as f64;
        for i in 0..d_centered.cells() {
            for ((o, v), m) in d_feat.at_mut(i).iter_mut().zip(d_centered.at(i)).zip(&mean) {
                *o += v - m / n;
            }
        }
    }
}

impl PromptDecoder for ToyPromptDecoder<'_> {
    fn decode(&mut self, feat: &DenseFeature, batch: &[PointPrompt]) -> Result<Vec<DecodedMask>> {
        check_decode_batch(feat, batch)?;
        self.params.validate(feat.channels())?;
        let centered = Self::centered(feat);
        let keys = self.keys(&centered);
        let up = Upsampler::new(feat.rows(), feat.cols(), feat.stride);
        Ok(batch
            .iter()
            .map(|prompt| {
                let (_, query, logits, _) = self.cell_logits(feat, &centered, &keys, prompt);
                DecodedMask {
                    mask: up.threshold(&logits),
                    score: self.score(&query),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_reproduces_constant_and_transpose_is_adjoint() {
        let up = Upsampler::new(2, 3, 4);
        let out = up.upsample(&[1.5; 6]);
        assert!(out.iter().all(|v| (v - 1.5).abs() < 1e-12));
        let mut rng = RngHandle::new(3, 0);
        let cells: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let pix: Vec<f64> = (0..8 * 12).map(|_| rng.normal()).collect();
        let lhs = dot(&up.upsample(&cells), &pix);
        let rhs = dot(&cells, &up.transpose(&pix));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn cell_centers_interpolate_exactly() {
        let up = Upsampler::new(1, 2, 2);
        let out = up.upsample(&[0.0, 4.0]);
        assert_eq!(out[..4], [0.0, 1.0, 3.0, 4.0]);
        assert_eq!(out[..4], out[4..]);
        let up = Upsampler::new(1, 2, 4);
        let out = up.upsample(&[0.0, 4.0]);
        assert_eq!(out[..8], [0.0, 0.0, 0.5, 1.5, 2.5, 3.5, 4.0, 4.0]);
    }
}

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{GeometricEncoder, SemanticEncoder};
use crate::adapter::{self, AdapterCache, AdapterParams};
use crate::error::{config_err, Result};
use crate::math::{self, gelu, gelu_grad, matvec, matvec_t_acc};
use crate::rng::RngHandle;
use crate::tensor::Grid;
use crate::types::{Branch, DenseFeature, ImageTensor};

const LN_EPS: f64 = 1e-6;
/// Highest cosine frequency (per axis) in the patch-embedding basis.
const MAX_FREQ: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub stride: usize,
    pub channels: usize,
    pub blocks: usize,
    /// Hidden width of each mixing block as a multiple of `channels`.
    pub hidden_mult: usize,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            stride: 14,
            channels: 64,
            blocks: 2,
            hidden_mult: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MixBlock {
    /// `hidden x channels`
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// `channels x hidden`
    w2: Vec<f64>,
}

/// Frozen desk-scale encoder: a patch embedding followed by residual
/// channel-mixing blocks and a final layer norm, with an adapter insertion
/// point after every block.
///
/// The patch embedding mixes a low-frequency cosine basis of each color plane,
/// so cell features respond linearly to the patch's mean color, its color
/// gradients and coarse texture, roughly like the early layers of a pretrained
/// ViT. All weights are drawn once from the seed and never change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoder {
    cfg: ToyEncoderConfig,
    /// `channels x (stride * stride * 3)`, pixel-major then color.
    patch_w: Vec<f64>,
    patch_b: Vec<f64>,
    blocks: Vec<MixBlock>,
}

/// Intermediates of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    block_normed: Vec<Grid>,
    block_inv_std: Vec<Vec<f64>>,
    block_pre_act: Vec<Grid>,
    adapters: Vec<AdapterCache>,
    out_normed: Grid,
    out_inv_std: Vec<f64>,
}

/// Channel-wise layer norm without affine parameters.
fn layer_norm(x: &Grid) -> (Grid, Vec<f64>) {
    let c = x.channels();
    let mut normed = Grid::zeros(x.rows(), x.cols(), c);
    let mut inv_std = Vec::with_capacity(x.cells());
    for i in 0..x.cells() {
        let xi = x.at(i);
        let mean = xi.iter().sum::<f64>() / c as f64;
        let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / math::sqrt(var + LN_EPS);
        inv_std.push(inv);
        for (o, v) in normed.at_mut(i).iter_mut().zip(xi) {
            *o = (v - mean) * inv;
        }
    }
    (normed, inv_std)
}

/// Accumulates the input gradient of [`layer_norm`] for one cell into `out`.
fn layer_norm_backward_acc(normed: &[f64], inv: f64, d: &[f64], out: &mut [f64]) {
    let c = d.len() as f64;
    let mean_d = d.iter().sum::<f64>() / c;
    let mean_dx = d.iter().zip(normed).map(|(a, b)| a * b).sum::<f64>() / c;
    for ((o, dn), x) in out.iter_mut().zip(d).zip(normed) {
        *o += inv * (dn - mean_d - x * mean_dx);
    }
}

fn cosine_basis(stride: usize) -> Vec<Vec<f64>> {
    let s = stride as f64;
    let mut basis = Vec::new();
    for fy in 0..=MAX_FREQ {
        for fx in 0..=MAX_FREQ {
            let mut b = Vec::with_capacity(stride * stride);
            for y in 0..stride {
                for x in 0..stride {
                    let cy = math::cos(core::f64::consts::PI * fy as f64 * (y as f64 + 0.5) / s);
                    let cx = math::cos(core::f64::consts::PI * fx as f64 * (x as f64 + 0.5) / s);
                    b.push(cy * cx);
                }
            }
            let norm = math::l2_norm(&b);
            b.iter_mut().for_each(|v| *v /= norm);
            basis.push(b);
        }
    }
    basis
}

impl ToyEncoder {
    pub fn new(cfg: ToyEncoderConfig, seed: u64) -> Result<Self> {
        if cfg.stride == 0 || cfg.channels < 2 || cfg.hidden_mult == 0 {
            return Err(config_err!("invalid toy encoder configuration {cfg:?}"));
        }
        let mut rng = RngHandle::new(seed, 0x0e4c);
        let (s, c) = (cfg.stride, cfg.channels);
        let basis = cosine_basis(s);
        let n_basis = basis.len() * 3;
        let patch_len = s * s * 3;
        let mut patch_w = vec![0.0; c * patch_len];
        for row in patch_w.chunks_exact_mut(patch_len) {
            for (bi, b) in basis.iter().enumerate() {
                for color in 0..3 {
                    let coef = rng.normal() / math::sqrt(n_basis as f64);
                    let scale = if bi == 0 { 3.0 } else { 1.0 };
                    for (p, &v) in b.iter().enumerate() {
                        row[p * 3 + color] += scale * coef * v;
                    }
                }
            }
        }
        let patch_b = (0..c).map(|_| 0.1 * rng.normal()).collect();
        let hidden = c * cfg.hidden_mult;
        let blocks = (0..cfg.blocks)
            .map(|_| MixBlock {
                w1: (0..hidden * c)
                    .map(|_| rng.normal() / math::sqrt(c as f64))
                    .collect(),
                b1: (0..hidden).map(|_| 0.1 * rng.normal()).collect(),
                w2: (0..c * hidden)
                    .map(|_| 0.5 * rng.normal() / math::sqrt(hidden as f64))
                    .collect(),
            })
            .collect();
        Ok(Self {
            cfg,
            patch_w,
            patch_b,
            blocks,
        })
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.cfg
    }

    /// FNV-1a hash over the bit patterns of every frozen weight.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |vals: &[f64]| {
            for v in vals {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        };
        feed(&self.patch_w);
        feed(&self.patch_b);
        for b in &self.blocks {
            feed(&b.w1);
            feed(&b.b1);
            feed(&b.w2);
        }
        h
    }

    /// Patch embedding of an image.
    pub fn embed_patches(&self, image: &ImageTensor) -> Result<Grid> {
        let s = self.cfg.stride;
        image.check_stride(s)?;
        let (rows, cols) = (image.height() / s, image.width() / s);
        let mut grid = Grid::zeros(rows, cols, self.cfg.channels);
        let mut patch = vec![0.0; s * s * 3];
        for r in 0..rows {
            for c in 0..cols {
                for y in 0..s {
                    for x in 0..s {
                        let px = image.pixel(r * s + y, c * s + x);
                        for (ch, v) in px.iter().enumerate() {
                            patch[(y * s + x) * 3 + ch] = 2.0 * v - 1.0;
                        }
                    }
                }
                let cell = grid.cell_mut(r, c);
                matvec(&self.patch_w, &patch, cell);
                for (o, b) in cell.iter_mut().zip(&self.patch_b) {
                    *o += b;
                }
            }
        }
        Ok(grid)
    }

    fn check_adapters(&self, adapters: &[AdapterParams]) -> Result<()> {
        if !adapters.is_empty() && adapters.len() != self.cfg.blocks {
            return Err(config_err!(
                "encoder has {} adapter insertion points, got {} adapters",
                self.cfg.blocks,
                adapters.len()
            ));
        }
        Ok(())
    }

    fn block_forward(block: &MixBlock, x: &Grid) -> (Grid, Grid, Vec<f64>, Grid) {
        let hidden = block.b1.len();
        let (normed, inv_std) = layer_norm(x);
        let mut pre = Grid::zeros(x.rows(), x.cols(), hidden);
        let mut out = x.clone();
        let mut act = vec![0.0; hidden];
        for i in 0..x.cells() {
            let z = pre.at_mut(i);
            matvec(&block.w1, normed.at(i), z);
            for ((zv, b), a) in z.iter_mut().zip(&block.b1).zip(act.iter_mut()) {
                *zv += b;
                *a = gelu(*zv);
            }
            let o = out.at_mut(i);
            for (ov, row) in o.iter_mut().zip(block.w2.chunks_exact(hidden)) {
                *ov += math::dot(row, &act);
            }
        }
        (out, normed, inv_std, pre)
    }

    fn block_backward(block: &MixBlock, normed: &Grid, inv_std: &[f64], pre: &Grid, d_out: &Grid) -> Grid {
        let c = d_out.channels();
        let hidden = block.b1.len();
        let mut d_in = d_out.clone();
        let mut d_z = vec![0.0; hidden];
        let mut d_n = vec![0.0; c];
        for i in 0..d_out.cells() {
            d_z.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(&block.w2, d_out.at(i), &mut d_z);
            for (d, &z) in d_z.iter_mut().zip(pre.at(i)) {
                *d *= gelu_grad(z);
            }
            d_n.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(&block.w1, &d_z, &mut d_n);
            layer_norm_backward_acc(normed.at(i), inv_std[i], &d_n, d_in.at_mut(i));
        }
        d_in
    }

    /// Runs the blocks (and adapters, when given) on a patch embedding.
    pub fn forward_from_embedding(
        &self,
        embedding: Grid,
        adapters: &[AdapterParams],
    ) -> Result<(Grid, EncoderCache)> {
        self.check_adapters(adapters)?;
        let mut cache = EncoderCache {
            block_normed: Vec::new(),
            block_inv_std: Vec::new(),
            block_pre_act: Vec::new(),
            adapters: Vec::new(),
            out_normed: Grid::zeros(0, 0, 0),
            out_inv_std: Vec::new(),
        };
        let mut x = embedding;
        for (b, block) in self.blocks.iter().enumerate() {
            let (out, normed, inv_std, pre) = Self::block_forward(block, &x);
            cache.block_normed.push(normed);
            cache.block_inv_std.push(inv_std);
            cache.block_pre_act.push(pre);
            x = out;
            if let Some(params) = adapters.get(b) {
                let (y, ac) = adapter::forward_cached(&x, params)?;
                cache.adapters.push(ac);
                x = y;
            }
        }
        let (out, inv_std) = layer_norm(&x);
        cache.out_normed = out.clone();
        cache.out_inv_std = inv_std;
        Ok((out, cache))
    }

    /// Encoder pass that keeps the intermediates needed for [`ToyEncoder::backward`].
    pub fn forward_cached(
        &self,
        image: &ImageTensor,
        adapters: &[AdapterParams],
    ) -> Result<(Grid, EncoderCache)> {
        self.check_adapters(adapters)?;
        let embedding = self.embed_patches(image)?;
        self.forward_from_embedding(embedding, adapters)
    }

    /// Back-propagates a feature gradient into adapter gradients (one per
    /// adapter, accumulated into `grads`). Base weights get no gradient.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        adapters: &[AdapterParams],
        d_out: &Grid,
        grads: &mut [AdapterParams],
    ) {
        if adapters.is_empty() {
            return;
        }
        let mut d = Grid::zeros(d_out.rows(), d_out.cols(), d_out.channels());
        for i in 0..d.cells() {
            layer_norm_backward_acc(cache.out_normed.at(i), cache.out_inv_std[i], d_out.at(i), d.at_mut(i));
        }
        for b in (0..self.blocks.len()).rev() {
            d = adapter::backward(&adapters[b], &cache.adapters[b], &d, &mut grads[b]);
            if b == 0 {
                break;
            }
            d = Self::block_backward(
                &self.blocks[b],
                &cache.block_normed[b],
                &cache.block_inv_std[b],
                &cache.block_pre_act[b],
                &d,
            );
        }
    }

    fn encode(&self, image: &ImageTensor, adapters: &[AdapterParams], source: Branch) -> Result<DenseFeature> {
        let (values, _) = self.forward_cached(image, adapters)?;
        Ok(DenseFeature {
            values,
            stride: self.cfg.stride,
            source,
        })
    }
}

impl SemanticEncoder for ToyEncoder {
    fn stride(&self) -> usize {
        self.cfg.stride
    }

    fn channels(&self) -> usize {
        self.cfg.channels
    }

    fn insertion_points(&self) -> usize {
        self.cfg.blocks
    }

    fn encode_semantic(&self, image: &ImageTensor, adapters: &[AdapterParams]) -> Result<DenseFeature> {
        self.encode(image, adapters, Branch::Semantic)
    }
}

impl GeometricEncoder for ToyEncoder {
    fn stride(&self) -> usize {
        self.cfg.stride
    }

    fn channels(&self) -> usize {
        self.cfg.channels
    }

    fn insertion_points(&self) -> usize {
        self.cfg.blocks
    }

    fn encode_geometric(&self, image: &ImageTensor, adapters: &[AdapterParams]) -> Result<DenseFeature> {
        self.encode(image, adapters, Branch::Geometric)
    }
}

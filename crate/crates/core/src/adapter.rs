//! Residual feature adapter for frozen encoders.
//!
//! Each cell's channel vector is first calibrated as
//! `F_E = alpha * LN(F) + beta * F`. The calibrated grid is projected down to a
//! bottleneck, refined by the mean of three zero-padded depth-wise convolutions
//! (kernel sizes 1, 3 and 5), mixed point-wise, passed through GeLU, projected
//! back up and added to the original, uncalibrated input:
//!
//! ```text
//! D   = Down(F_E)
//! F_M = D + (dw1(D) + dw3(D) + dw5(D)) / 3
//! out = F + Up(gelu(F_M + Pw(F_M)))
//! ```

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::math::{gelu, gelu_grad, matvec, matvec_t_acc, outer_acc};
use crate::params::{init_gaussian, tensor, NamedTensor, Parameters};
use crate::rng::RngHandle;
use crate::tensor::Grid;
use crate::types::DenseFeature;

/// Depth-wise kernel sizes, in the order they are stored.
pub const KERNEL_SIZES: [usize; 3] = [1, 3, 5];

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Up-projection zeroed, so the adapter starts as the identity.
    ZeroUp,
    /// Every projection drawn from a small Gaussian.
    SmallGaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Bottleneck width as a fraction of the channel count, in `(0, 0.5]`.
    pub bottleneck_ratio: f64,
    pub init_scheme: InitScheme,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            bottleneck_ratio: 0.25,
            init_scheme: InitScheme::ZeroUp,
        }
    }
}

impl AdapterConfig {
    pub fn bottleneck(&self, channels: usize) -> Result<usize> {
        if !(self.bottleneck_ratio > 0.0 && self.bottleneck_ratio <= 0.5) {
            return Err(config_err!(
                "bottleneck ratio {} outside (0, 0.5]",
                self.bottleneck_ratio
            ));
        }
        let b = libm::round(channels as f64 * self.bottleneck_ratio) as usize;
        Ok(b.max(1))
    }
}

/// Learnable adapter tensors. Matrices are row-major `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub channels: usize,
    pub bottleneck: usize,
    pub alpha_cal: f64,
    pub beta_cal: f64,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    /// `bottleneck x channels`
    pub down: Vec<f64>,
    /// Depth-wise kernels for sizes 1, 3, 5: `bottleneck x size x size` each.
    pub dw: [Vec<f64>; 3],
    /// `bottleneck x bottleneck`
    pub pw: Vec<f64>,
    /// `channels x bottleneck`
    pub up: Vec<f64>,
}

impl AdapterParams {
    pub fn init(channels: usize, cfg: &AdapterConfig, rng: &mut RngHandle) -> Result<Self> {
        let b = cfg.bottleneck(channels)?;
        if b >= channels {
            return Err(config_err!(
                "bottleneck {b} must be smaller than channel count {channels}"
            ));
        }
        let down = init_gaussian(rng, b * channels, INIT_STD);
        let dw = KERNEL_SIZES.map(|k| init_gaussian(rng, b * k * k, INIT_STD));
        let pw = init_gaussian(rng, b * b, INIT_STD);
        let up = match cfg.init_scheme {
            InitScheme::ZeroUp => vec![0.0; channels * b],
            InitScheme::SmallGaussian => init_gaussian(rng, channels * b, INIT_STD),
        };
        Ok(Self {
            channels,
            bottleneck: b,
            alpha_cal: 0.0,
            beta_cal: 1.0,
            ln_gain: vec![1.0; channels],
            ln_bias: vec![0.0; channels],
            down,
            dw,
            pw,
            up,
        })
    }

    /// Same shapes, every value zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            channels: self.channels,
            bottleneck: self.bottleneck,
            alpha_cal: 0.0,
            beta_cal: 0.0,
            ln_gain: vec![0.0; self.channels],
            ln_bias: vec![0.0; self.channels],
            down: vec![0.0; self.down.len()],
            dw: KERNEL_SIZES.map(|k| vec![0.0; self.bottleneck * k * k]),
            pw: vec![0.0; self.pw.len()],
            up: vec![0.0; self.up.len()],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let (c, b) = (self.channels, self.bottleneck);
        if c != channels {
            return Err(config_err!(
                "adapter built for {c} channels applied to {channels}"
            ));
        }
        let sizes_ok = self.ln_gain.len() == c
            && self.ln_bias.len() == c
            && self.down.len() == b * c
            && self.pw.len() == b * b
            && self.up.len() == c * b
            && self
                .dw
                .iter()
                .zip(KERNEL_SIZES)
                .all(|(w, k)| w.len() == b * k * k);
        if !sizes_ok || b == 0 || b >= c {
            return Err(config_err!("adapter tensors inconsistent with C={c}, C_b={b}"));
        }
        Ok(())
    }
}

impl Parameters for AdapterParams {
    fn named(&self) -> Vec<NamedTensor<'_>> {
        let (c, b) = (self.channels, self.bottleneck);
        vec![
            tensor("alpha_cal", &[1], core::slice::from_ref(&self.alpha_cal)),
            tensor("beta_cal", &[1], core::slice::from_ref(&self.beta_cal)),
            tensor("ln_gain", &[c], &self.ln_gain),
            tensor("ln_bias", &[c], &self.ln_bias),
            tensor("down_weights", &[b, c], &self.down),
            tensor("dw_kernel_1", &[b, 1, 1], &self.dw[0]),
            tensor("dw_kernel_3", &[b, 3, 3], &self.dw[1]),
            tensor("dw_kernel_5", &[b, 5, 5], &self.dw[2]),
            tensor("pw_weights", &[b, b], &self.pw),
            tensor("up_weights", &[c, b], &self.up),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let [dw1, dw3, dw5] = &mut self.dw;
        vec![
            core::slice::from_mut(&mut self.alpha_cal),
            core::slice::from_mut(&mut self.beta_cal),
            &mut self.ln_gain,
            &mut self.ln_bias,
            &mut self.down,
            dw1,
            dw3,
            dw5,
            &mut self.pw,
            &mut self.up,
        ]
    }
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AdapterCache {
    input: Grid,
    normed: Grid,
    inv_std: Vec<f64>,
    calibrated: Grid,
    down: Grid,
    mixed: Grid,
    pre_act: Grid,
    act: Grid,
}

fn check_input(feat: &Grid, params: &AdapterParams) -> Result<()> {
    params.validate(feat.channels())?;
    if !feat.is_finite() {
        return Err(Error::numeric("adapter.input", "non-finite input feature"));
    }
    Ok(())
}

/// Per-cell layer normalization without the affine part; returns `(x_hat, 1/sigma)`.
fn normalize(feat: &Grid) -> (Grid, Vec<f64>) {
    let c = feat.channels();
    let mut normed = Grid::zeros(feat.rows(), feat.cols(), c);
    let mut inv_std = Vec::with_capacity(feat.cells());
    for i in 0..feat.cells() {
        let x = feat.at(i);
        let mean = x.iter().sum::<f64>() / c as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / crate::math::sqrt(var + LN_EPS);
        for (o, v) in normed.at_mut(i).iter_mut().zip(x) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (normed, inv_std)
}

fn calibrate_grid(feat: &Grid, normed: &Grid, params: &AdapterParams) -> Grid {
    let mut out = Grid::zeros(feat.rows(), feat.cols(), feat.channels());
    for i in 0..feat.cells() {
        let (x, xh) = (feat.at(i), normed.at(i));
        for (ch, o) in out.at_mut(i).iter_mut().enumerate() {
            let ln = params.ln_gain[ch] * xh[ch] + params.ln_bias[ch];
            *o = params.alpha_cal * ln + params.beta_cal * x[ch];
        }
    }
    out
}

/// Distributional calibration `alpha * LN(F) + beta * F`, per cell over channels.
pub fn calibrate(feat: &DenseFeature, params: &AdapterParams) -> Result<DenseFeature> {
    check_input(&feat.values, params)?;
    let (normed, _) = normalize(&feat.values);
    Ok(DenseFeature {
        values: calibrate_grid(&feat.values, &normed, params),
        stride: feat.stride,
        source: feat.source,
    })
}

fn pointwise(input: &Grid, weights: &[f64], out_channels: usize) -> Grid {
    let mut out = Grid::zeros(input.rows(), input.cols(), out_channels);
    for i in 0..input.cells() {
        matvec(weights, input.at(i), out.at_mut(i));
    }
    out
}

/// Zero-padded depth-wise cross-correlation, accumulated into `out` with `scale`.
fn depthwise_acc(input: &Grid, kernel: &[f64], size: usize, scale: f64, out: &mut Grid) {
    let (rows, cols, ch) = (input.rows() as isize, input.cols() as isize, input.channels());
    let half = (size / 2) as isize;
    for r in 0..rows {
        for c in 0..cols {
            for ky in 0..size as isize {
                let rr = r + ky - half;
                if rr < 0 || rr >= rows {
                    continue;
                }
                for kx in 0..size as isize {
                    let cc = c + kx - half;
                    if cc < 0 || cc >= cols {
                        continue;
                    }
                    let tap = (ky as usize) * size + kx as usize;
                    let src = input.cell(rr as usize, cc as usize);
                    let dst = out.cell_mut(r as usize, c as usize);
                    for b in 0..ch {
                        dst[b] += scale * kernel[b * size * size + tap] * src[b];
                    }
                }
            }
        }
    }
}

/// Gradients of [`depthwise_acc`] w.r.t. its input and kernel.
fn depthwise_backward(
    input: &Grid,
    kernel: &[f64],
    size: usize,
    scale: f64,
    d_out: &Grid,
    d_input: &mut Grid,
    d_kernel: &mut [f64],
) {
    let (rows, cols, ch) = (input.rows() as isize, input.cols() as isize, input.channels());
    let half = (size / 2) as isize;
    for r in 0..rows {
        for c in 0..cols {
            let g = d_out.cell(r as usize, c as usize);
            for ky in 0..size as isize {
                let rr = r + ky - half;
                if rr < 0 || rr >= rows {
                    continue;
                }
                for kx in 0..size as isize {
                    let cc = c + kx - half;
                    if cc < 0 || cc >= cols {
                        continue;
                    }
                    let tap = (ky as usize) * size + kx as usize;
                    let src_index = rr as usize * cols as usize + cc as usize;
                    for b in 0..ch {
                        let w = kernel[b * size * size + tap];
                        d_kernel[b * size * size + tap] += scale * g[b] * input.at(src_index)[b];
                        d_input.at_mut(src_index)[b] += scale * w * g[b];
                    }
                }
            }
        }
    }
}

fn finite_or(layer: &str, grid: &Grid) -> Result<()> {
    if grid.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(layer, "non-finite activation"))
    }
}

/// Full adapter forward pass keeping the intermediates for [`backward`].
pub fn forward_cached(feat: &Grid, params: &AdapterParams) -> Result<(Grid, AdapterCache)> {
    check_input(feat, params)?;
    let (c, b) = (params.channels, params.bottleneck);
    let (normed, inv_std) = normalize(feat);
    let calibrated = calibrate_grid(feat, &normed, params);
    finite_or("adapter.calibrate", &calibrated)?;
    let down = pointwise(&calibrated, &params.down, b);
    finite_or("adapter.down", &down)?;
    let mut mixed = down.clone();
    for (kernel, size) in params.dw.iter().zip(KERNEL_SIZES) {
        depthwise_acc(&down, kernel, size, 1.0 / 3.0, &mut mixed);
    }
    finite_or("adapter.depthwise", &mixed)?;
    let mut pre_act = pointwise(&mixed, &params.pw, b);
    pre_act.add_assign(&mixed);
    finite_or("adapter.pointwise", &pre_act)?;
    let mut act = pre_act.clone();
    act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let mut out = pointwise(&act, &params.up, c);
    out.add_assign(feat);
    finite_or("adapter.up", &out)?;
    let cache = AdapterCache {
        input: feat.clone(),
        normed,
        inv_std,
        calibrated,
        down,
        mixed,
        pre_act,
        act,
    };
    Ok((out, cache))
}

/// Adapter forward pass: `F + Up(gelu(F_M + Pw(F_M)))`.
pub fn forward(feat: &DenseFeature, params: &AdapterParams) -> Result<DenseFeature> {
    let (values, _) = forward_cached(&feat.values, params)?;
    Ok(DenseFeature {
        values,
        stride: feat.stride,
        source: feat.source,
    })
}

/// Back-propagates `d_out`; returns the input gradient and accumulates
/// parameter gradients into `grads`.
pub fn backward(
    params: &AdapterParams,
    cache: &AdapterCache,
    d_out: &Grid,
    grads: &mut AdapterParams,
) -> Grid {
    let (c, b) = (params.channels, params.bottleneck);
    let cells = d_out.cells();
    // residual
    let mut d_input = d_out.clone();

    let mut d_pre = Grid::zeros(d_out.rows(), d_out.cols(), b);
    for i in 0..cells {
        let g = d_out.at(i);
        outer_acc(&mut grads.up, g, cache.act.at(i));
        let d_act = d_pre.at_mut(i);
        matvec_t_acc(&params.up, g, d_act);
        for (d, &z) in d_act.iter_mut().zip(cache.pre_act.at(i)) {
            *d *= gelu_grad(z);
        }
    }

    let mut d_mixed = d_pre.clone();
    for i in 0..cells {
        outer_acc(&mut grads.pw, d_pre.at(i), cache.mixed.at(i));
        matvec_t_acc(&params.pw, d_pre.at(i), d_mixed.at_mut(i));
    }

    let mut d_down = d_mixed.clone();
    for (k, size) in KERNEL_SIZES.iter().enumerate() {
        depthwise_backward(
            &cache.down,
            &params.dw[k],
            *size,
            1.0 / 3.0,
            &d_mixed,
            &mut d_down,
            &mut grads.dw[k],
        );
    }

    let mut d_cal = vec![0.0; c];
    let mut d_ln = vec![0.0; c];
    for i in 0..cells {
        d_cal.iter_mut().for_each(|v| *v = 0.0);
        outer_acc(&mut grads.down, d_down.at(i), cache.calibrated.at(i));
        matvec_t_acc(&params.down, d_down.at(i), &mut d_cal);

        let x = cache.input.at(i);
        let xh = cache.normed.at(i);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for ch in 0..c {
            let ln = params.ln_gain[ch] * xh[ch] + params.ln_bias[ch];
            grads.alpha_cal += d_cal[ch] * ln;
            grads.beta_cal += d_cal[ch] * x[ch];
            let g_ln = params.alpha_cal * d_cal[ch];
            grads.ln_gain[ch] += g_ln * xh[ch];
            grads.ln_bias[ch] += g_ln;
            d_ln[ch] = g_ln * params.ln_gain[ch];
            mean_d += d_ln[ch];
            mean_dx += d_ln[ch] * xh[ch];
        }
        mean_d /= c as f64;
        mean_dx /= c as f64;
        let inv = cache.inv_std[i];
        let d_in = d_input.at_mut(i);
        for ch in 0..c {
            d_in[ch] += params.beta_cal * d_cal[ch] + inv * (d_ln[ch] - mean_d - xh[ch] * mean_dx);
        }
    }
    d_input
}

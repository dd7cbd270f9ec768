#![allow(dead_code)]

use promptseg_core::backbone::{DecodedMask, PromptDecoder};
use promptseg_core::types::{Branch, DenseFeature, ImageTensor, PointPrompt};
use promptseg_core::{BitMask, Grid, LabelMap, RngHandle};

pub const FD_STEP: f64 = 1e-5;

/// Relative agreement with an absolute floor for near-zero derivatives.
pub fn close(analytic: f64, numeric: f64, rel: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-8 || diff <= rel * analytic.abs().max(numeric.abs())
}

/// Central-difference check of `analytic` at `x` for the coordinates in `which`.
pub fn check_gradient(
    what: &str,
    x: &[f64],
    analytic: &[f64],
    which: impl IntoIterator<Item = usize>,
    rel: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) {
    assert_eq!(x.len(), analytic.len(), "{what}: gradient length");
    let mut probe = x.to_vec();
    for i in which {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        assert!(
            close(analytic[i], numeric, rel),
            "{what}[{i}]: analytic {} vs numeric {numeric}",
            analytic[i]
        );
    }
}

pub fn gaussian(rng: &mut RngHandle, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.normal()).collect()
}

pub fn grid(rng: &mut RngHandle, rows: usize, cols: usize, c: usize) -> Grid {
    Grid::from_vec(rows, cols, c, gaussian(rng, rows * cols * c, 1.0)).unwrap()
}

pub fn feature(rng: &mut RngHandle, rows: usize, cols: usize, c: usize, stride: usize, source: Branch) -> DenseFeature {
    DenseFeature {
        values: grid(rng, rows, cols, c),
        stride,
        source,
    }
}

pub fn image(rng: &mut RngHandle, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(h, w, (0..h * w * 3).map(|_| rng.uniform()).collect()).unwrap()
}

pub fn labels(rng: &mut RngHandle, h: usize, w: usize, k: usize) -> LabelMap {
    LabelMap::from_vec(h, w, (0..h * w).map(|_| rng.below(k) as u8).collect()).unwrap()
}

/// Label map with one axis-aligned rectangle per non-background class.
pub fn rect_labels(h: usize, w: usize, rects: &[(u8, usize, usize, usize, usize)]) -> LabelMap {
    let mut l = LabelMap::filled(h, w, 0);
    for &(k, r0, c0, r1, c1) in rects {
        for r in r0..r1 {
            for c in c0..c1 {
                l.set(r, c, k);
            }
        }
    }
    l
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Decoder with arbitrary (possibly empty or low-scoring) masks that records every batch.
pub struct Recording {
    pub inner: Box<dyn PromptDecoder>,
    pub batches: Vec<Vec<PointPrompt>>,
}

impl PromptDecoder for Recording {
    fn decode(&mut self, feat: &DenseFeature, batch: &[PointPrompt]) -> promptseg_core::Result<Vec<DecodedMask>> {
        self.batches.push(batch.to_vec());
        self.inner.decode(feat, batch)
    }
}

pub struct RandomDecoder {
    pub rng: RngHandle,
    pub reject_all: bool,
}

impl PromptDecoder for RandomDecoder {
    fn decode(&mut self, feat: &DenseFeature, batch: &[PointPrompt]) -> promptseg_core::Result<Vec<DecodedMask>> {
        let (h, w) = feat.image_size();
        Ok(batch
            .iter()
            .map(|_| {
                if self.reject_all {
                    return DecodedMask { mask: BitMask::new(h, w), score: 0.0 };
                }
                let (cy, cx, r) = (self.rng.below(h), self.rng.below(w), 1 + self.rng.below(h / 2));
                let mask = BitMask::from_fn(h, w, |y, x| y.abs_diff(cy).max(x.abs_diff(cx)) <= r);
                DecodedMask { mask, score: self.rng.uniform() }
            })
            .collect())
    }
}

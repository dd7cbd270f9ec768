use alloc::vec::Vec;

use super::{check_decode_batch, DecodedMask, PromptDecoder};
use crate::error::Result;
use crate::mask::{BitMask, LabelMap};
use crate::rng::RngHandle;
use crate::types::{DenseFeature, PointPrompt, BACKGROUND};

/// Half-width (pixels, Chebyshev) of the band in which noisy oracle masks are corrupted.
pub const ORACLE_BAND_RADIUS: usize = 5;

/// Test decoder that answers prompts from a ground-truth label map.
///
/// A prompt on a labelled pixel yields the 4-connected component of that label
/// containing it; a prompt on background yields an empty mask with score 0.
/// With noise `eta > 0`, every pixel of the band
/// `dilate(component, r) \ erode(component, r)` (square structuring element,
/// `r =` [`ORACLE_BAND_RADIUS`]) is flipped with probability `eta`, one uniform
/// draw per band pixel in row-major order, and the score becomes the IoU of the
/// corrupted mask against the true component.
#[derive(Clone, Debug)]
pub struct OracleDecoder {
    labels: LabelMap,
    noise: f64,
    rng: RngHandle,
}

impl OracleDecoder {
    pub fn new(labels: LabelMap, noise: f64, rng: RngHandle) -> Self {
        Self {
            labels,
            noise: noise.clamp(0.0, 1.0),
            rng,
        }
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn rng(&self) -> &RngHandle {
        &self.rng
    }

    fn decode_one(&mut self, prompt: &PointPrompt) -> DecodedMask {
        let (h, w) = (self.labels.height(), self.labels.width());
        if self.labels.get(prompt.y, prompt.x) as usize == BACKGROUND {
            return DecodedMask {
                mask: BitMask::new(h, w),
                score: 0.0,
            };
        }
        let truth = self.labels.component(prompt.y, prompt.x);
        if self.noise == 0.0 {
            return DecodedMask {
                mask: truth,
                score: 1.0,
            };
        }
        let band = boundary_band(&truth, ORACLE_BAND_RADIUS);
        let mut mask = truth.clone();
        for i in band.ones() {
            if self.rng.uniform() < self.noise {
                let v = mask.get_index(i);
                mask.set_index(i, !v);
            }
        }
        let score = mask.iou(&truth);
        DecodedMask { mask, score }
    }
}

impl PromptDecoder for OracleDecoder {
    fn decode(&mut self, feat: &DenseFeature, batch: &[PointPrompt]) -> Result<Vec<DecodedMask>> {
        check_decode_batch(feat, batch)?;
        Ok(batch.iter().map(|p| self.decode_one(p)).collect())
    }
}

/// Square-element dilation with radius `r`; pixels outside the image count as unset.
pub(crate) fn dilate(mask: &BitMask, r: usize) -> BitMask {
    let (h, w) = (mask.height(), mask.width());
    let mut horiz = BitMask::new(h, w);
    for row in 0..h {
        // distance to the nearest set pixel on the left, then on the right
        let mut last: Option<usize> = None;
        for col in 0..w {
            if mask.get(row, col) {
                last = Some(col);
            }
            if last.is_some_and(|l| col - l <= r) {
                horiz.set(row, col, true);
            }
        }
        let mut next: Option<usize> = None;
        for col in (0..w).rev() {
            if mask.get(row, col) {
                next = Some(col);
            }
            if next.is_some_and(|n| n - col <= r) {
                horiz.set(row, col, true);
            }
        }
    }
    let mut out = BitMask::new(h, w);
    for col in 0..w {
        let mut last: Option<usize> = None;
        for row in 0..h {
            if horiz.get(row, col) {
                last = Some(row);
            }
            if last.is_some_and(|l| row - l <= r) {
                out.set(row, col, true);
            }
        }
        let mut next: Option<usize> = None;
        for row in (0..h).rev() {
            if horiz.get(row, col) {
                next = Some(row);
            }
            if next.is_some_and(|n| n - row <= r) {
                out.set(row, col, true);
            }
        }
    }
    out
}

/// Pixels within Chebyshev distance `r` of the boundary: `dilate(m) \ erode(m)`.
pub(crate) fn boundary_band(mask: &BitMask, r: usize) -> BitMask {
    let (h, w) = (mask.height(), mask.width());
    let complement = BitMask::from_fn(h, w, |row, col| !mask.get(row, col));
    // erosion treats out-of-image pixels as outside the mask
    let grown_out = dilate(&complement, r);
    let dil = dilate(mask, r);
    BitMask::from_fn(h, w, |row, col| {
        let eroded = !grown_out.get(row, col)
            && row >= r
            && col >= r
            && row + r < h
            && col + r < w;
        dil.get(row, col) && !eroded
    })
}

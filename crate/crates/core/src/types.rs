//! Domain types shared by every stage of the pipeline.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Result};
use crate::mask::{BitMask, LabelMap};
use crate::tensor::Grid;

/// Category index reserved for background.
pub const BACKGROUND: usize = 0;

/// RGB image with values in `[0, 1]`, stored row-major as `height x width x 3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(config_err!(
                "image has {} values, expected {height}x{width}x3",
                pixels.len()
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(usage_err!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Fails unless both sides are multiples of `stride`.
    pub fn check_stride(&self, stride: usize) -> Result<()> {
        if stride == 0 || !self.height.is_multiple_of(stride) || !self.width.is_multiple_of(stride) {
            return Err(config_err!(
                "image {}x{} is not divisible by stride {stride}",
                self.height,
                self.width
            ));
        }
        Ok(())
    }
}

/// Which encoder produced a feature grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "semantic_branch")]
    Semantic,
    #[serde(rename = "geometric_branch")]
    Geometric,
}

/// Encoder output: a `(H/s) x (W/s) x C` grid with its stride and origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseFeature {
    pub values: Grid,
    pub stride: usize,
    pub source: Branch,
}

impl DenseFeature {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn channels(&self) -> usize {
        self.values.channels()
    }

    /// Pixel size `(height, width)` of the image this grid came from.
    pub fn image_size(&self) -> (usize, usize) {
        (self.rows() * self.stride, self.cols() * self.stride)
    }

    pub fn expect_source(&self, branch: Branch) -> Result<()> {
        if self.source != branch {
            return Err(usage_err!(
                "expected a {branch:?} feature, got {:?}",
                self.source
            ));
        }
        Ok(())
    }
}

/// Per-category probability grid, `K x rows x cols`, normalized over `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternMap {
    pub num_classes: usize,
    pub rows: usize,
    pub cols: usize,
    /// Category-major: `probs[(k * rows + row) * cols + col]`.
    pub probs: Vec<f64>,
    pub categories: Vec<usize>,
}

impl PatternMap {
    pub fn new(num_classes: usize, rows: usize, cols: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_classes * rows * cols {
            return Err(config_err!(
                "pattern map has {} values, expected {num_classes}x{rows}x{cols}",
                probs.len()
            ));
        }
        Ok(Self {
            num_classes,
            rows,
            cols,
            probs,
            categories: (0..num_classes).collect(),
        })
    }

    #[inline]
    pub fn prob(&self, k: usize, row: usize, col: usize) -> f64 {
        self.probs[(k * self.rows + row) * self.cols + col]
    }

    #[inline]
    pub fn prob_mut(&mut self, k: usize, row: usize, col: usize) -> &mut f64 {
        &mut self.probs[(k * self.rows + row) * self.cols + col]
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.probs[k * n..(k + 1) * n]
    }

    pub fn same_shape(&self, other: &PatternMap) -> bool {
        self.num_classes == other.num_classes && self.rows == other.rows && self.cols == other.cols
    }
}

/// Category-tagged point prompt in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    /// Column in pixels.
    pub x: usize,
    /// Row in pixels.
    pub y: usize,
    pub category: usize,
    /// `(row, col)` of the feature cell the prompt was read from.
    pub origin_cell: (usize, usize),
}

impl PointPrompt {
    /// Prompt at the center of feature cell `(row, col)`.
    pub fn at_cell(row: usize, col: usize, stride: usize, category: usize) -> Self {
        Self {
            x: col * stride + stride / 2,
            y: row * stride + stride / 2,
            category,
            origin_cell: (row, col),
        }
    }

    /// Prompt at an arbitrary pixel; the origin cell is the one containing it.
    pub fn at_pixel(x: usize, y: usize, stride: usize, category: usize) -> Self {
        Self {
            x,
            y,
            category,
            origin_cell: (y / stride, x / stride),
        }
    }
}

/// Ordered prompts of one category.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub category: usize,
    pub prompts: Vec<PointPrompt>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Accepted or candidate mask with its geometric, semantic and fused scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredMask {
    mask: BitMask,
    s_iou: f64,
    s_sem: f64,
    fused: f64,
    category: usize,
}

impl ScoredMask {
    /// Builds a scored mask; `fused` is the product of the two scores.
    pub fn new(mask: BitMask, s_iou: f64, s_sem: f64, category: usize) -> Result<Self> {
        if mask.is_empty() {
            return Err(usage_err!("scored masks must be nonempty"));
        }
        for (name, s) in [("s_iou", s_iou), ("s_sem", s_sem)] {
            if !(0.0..=1.0).contains(&s) {
                return Err(usage_err!("{name} = {s} outside [0, 1]"));
            }
        }
        Ok(Self {
            mask,
            s_iou,
            s_sem,
            fused: s_iou * s_sem,
            category,
        })
    }

    pub fn mask(&self) -> &BitMask {
        &self.mask
    }

    pub fn s_iou(&self) -> f64 {
        self.s_iou
    }

    pub fn s_sem(&self) -> f64 {
        self.s_sem
    }

    pub fn fused(&self) -> f64 {
        self.fused
    }

    pub fn category(&self) -> usize {
        self.category
    }
}

/// Per-category response maps and the label map derived from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Category-major `K x H x W`.
    pub response: Vec<f64>,
    pub labels: LabelMap,
}

impl SegmentationResult {
    /// Wraps a response stack and labels it with [`argmax_labels`].
    pub fn from_response(
        num_classes: usize,
        height: usize,
        width: usize,
        response: Vec<f64>,
        bg_threshold: f64,
    ) -> Result<Self> {
        if response.len() != num_classes * height * width {
            return Err(config_err!(
                "response has {} values, expected {num_classes}x{height}x{width}",
                response.len()
            ));
        }
        let labels = label_response(&response, num_classes, height, width, bg_threshold);
        Ok(Self {
            num_classes,
            height,
            width,
            response,
            labels,
        })
    }

    #[inline]
    pub fn response_at(&self, k: usize, row: usize, col: usize) -> f64 {
        self.response[(k * self.height + row) * self.width + col]
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.response[k * n..(k + 1) * n]
    }
}

/// Per-pixel argmax over the response stack, or background when the winning
/// value does not exceed `bg_threshold`. Ties go to the lowest category.
pub fn argmax_labels(result: &SegmentationResult, bg_threshold: f64) -> LabelMap {
    label_response(
        &result.response,
        result.num_classes,
        result.height,
        result.width,
        bg_threshold,
    )
}

fn label_response(
    response: &[f64],
    num_classes: usize,
    height: usize,
    width: usize,
    bg_threshold: f64,
) -> LabelMap {
    let n = height * width;
    let mut labels = vec![BACKGROUND as u8; n];
    for (i, label) in labels.iter_mut().enumerate() {
        let mut best = BACKGROUND;
        let mut best_value = f64::NEG_INFINITY;
        for k in 0..num_classes {
            let v = response[k * n + i];
            if v > best_value {
                best = k;
                best_value = v;
            }
        }
        if best_value > bg_threshold {
            *label = best as u8;
        }
    }
    LabelMap::from_vec(height, width, labels).expect("label buffer sized from shape")
}

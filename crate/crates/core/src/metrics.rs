//! Pixel confusion counts and IoU / F1 summaries.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Result};
use crate::mask::LabelMap;
use crate::types::BACKGROUND;

/// Per-class TP / FP / FN pixel counts, mergeable across workers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    pub num_classes: usize,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if !pred.same_shape(gt) {
            return Err(usage_err!(
                "prediction {}x{} does not match ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ));
        }
        pred.check_range(self.num_classes)?;
        gt.check_range(self.num_classes)?;
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            if p == g {
                self.tp[p as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[g as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(usage_err!(
                "cannot merge {} classes into {}",
                other.num_classes,
                self.num_classes
            ));
        }
        for k in 0..self.num_classes {
            self.tp[k] += other.tp[k];
            self.fp[k] += other.fp[k];
            self.fn_[k] += other.fn_[k];
        }
        Ok(())
    }

    pub fn metrics(&self, opts: &MetricOptions) -> MetricReport {
        let classes: Vec<ClassMetrics> = (0..self.num_classes)
            .map(|k| {
                let (tp, fp, fn_) = (self.tp[k], self.fp[k], self.fn_[k]);
                let denom = tp + fp + fn_;
                let (iou, f1) = if denom == 0 {
                    (None, None)
                } else {
                    (
                        Some(tp as f64 / denom as f64),
                        Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64),
                    )
                };
                ClassMetrics { tp, fp, fn_, iou, f1 }
            })
            .collect();
        let mean = |pick: fn(&ClassMetrics) -> Option<f64>| {
            let vals: Vec<f64> = classes
                .iter()
                .enumerate()
                .filter(|(k, _)| opts.include_background || *k != BACKGROUND)
                .filter_map(|(_, c)| match (pick(c), opts.undefined) {
                    (Some(v), _) => Some(v),
                    (None, UndefinedClass::Exclude) => None,
                    (None, UndefinedClass::Zero) => Some(0.0),
                })
                .collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        MetricReport {
            mean_iou: mean(|c| c.iou),
            mean_f1: mean(|c| c.f1),
            classes,
        }
    }
}

/// How classes absent from both prediction and ground truth enter the mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedClass {
    Exclude,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub include_background: bool,
    pub undefined: UndefinedClass,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            include_background: true,
            undefined: UndefinedClass::Exclude,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// `None` when the class never occurs in prediction or ground truth.
    pub iou: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: Vec<ClassMetrics>,
    pub mean_iou: Option<f64>,
    pub mean_f1: Option<f64>,
}

//! Metric tables, per-image diagnostics and loss logs.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use promptseg_core::metrics::MetricReport;
use promptseg_core::model::Prediction;
use promptseg_core::train::LossRecord;
use serde::Serialize;

use crate::error::{CliError, Result};

/// Bins of the candidate-score histograms over `[0, 1]`.
pub const HISTOGRAM_BINS: usize = 10;

pub fn class_name(k: usize) -> String {
    if k == 0 {
        "Background".into()
    } else {
        format!("Class {k}")
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "n/a".into())
}

/// Markdown table with one column per class plus the average, values in percent.
pub fn markdown_table(report: &MetricReport) -> String {
    let k = report.classes.len();
    let mut out = String::from("| Metric |");
    for i in 0..k {
        write!(out, " {} |", class_name(i)).unwrap();
    }
    out.push_str(" Average |\n|---|");
    out.push_str(&"---|".repeat(k + 1));
    out.push('\n');
    for (label, pick, mean) in [
        ("IoU", (|c: &promptseg_core::metrics::ClassMetrics| c.iou) as fn(&_) -> _, report.mean_iou),
        ("F1", |c| c.f1, report.mean_f1),
    ] {
        write!(out, "| {label} |").unwrap();
        for c in &report.classes {
            write!(out, " {} |", cell(pick(c))).unwrap();
        }
        writeln!(out, " {} |", cell(mean)).unwrap();
    }
    out
}

#[derive(Debug, Serialize)]
pub struct MetricsJson<'a> {
    pub classes: Vec<String>,
    pub report: &'a MetricReport,
    /// Largest `|F1 - 2 IoU / (1 + IoU)|` over classes with defined metrics.
    pub f1_identity_error: f64,
}

/// Checks `F1 = 2 IoU / (1 + IoU)` for every defined class.
pub fn f1_identity_error(report: &MetricReport) -> f64 {
    report
        .classes
        .iter()
        .filter_map(|c| Some((c.iou?, c.f1?)))
        .map(|(iou, f1)| (f1 - 2.0 * iou / (1.0 + iou)).abs())
        .fold(0.0, f64::max)
}

pub fn metrics_json(report: &MetricReport) -> Result<String> {
    let doc = MetricsJson {
        classes: (0..report.classes.len()).map(class_name).collect(),
        report,
        f1_identity_error: f1_identity_error(report),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| CliError::Format(e.to_string()))
}

#[derive(Debug, Serialize)]
pub struct CategoryDiagnostics {
    pub category: usize,
    pub prompts: usize,
    pub decoder_calls: usize,
    pub iterations: usize,
    pub accepted: usize,
    pub accepted_scores: Vec<f64>,
    /// Counts of candidate fused scores in equal-width bins over `[0, 1]`.
    pub score_histogram: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct Diagnostics {
    pub height: usize,
    pub width: usize,
    pub categories: Vec<CategoryDiagnostics>,
}

pub fn histogram(scores: &[f64]) -> Vec<usize> {
    let mut bins = vec![0; HISTOGRAM_BINS];
    for &s in scores {
        let b = ((s * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        bins[b] += 1;
    }
    bins
}

pub fn diagnostics(pred: &Prediction) -> Diagnostics {
    let categories = pred
        .sets
        .iter()
        .map(|set| CategoryDiagnostics {
            category: set.category,
            prompts: pred
                .prompts
                .iter()
                .find(|p| p.category == set.category)
                .map_or(0, |p| p.prompts.len()),
            decoder_calls: set.decoder_calls,
            iterations: set.iterations,
            accepted: set.accepted.len(),
            accepted_scores: set.accepted.iter().map(|m| m.fused()).collect(),
            score_histogram: histogram(&set.candidate_scores),
        })
        .collect();
    Diagnostics {
        height: pred.result.height,
        width: pred.result.width,
        categories,
    }
}

pub const LOSS_HEADER: &str = "iteration,L_seg,L_p,L";

pub fn loss_row(r: &LossRecord) -> String {
    format!("{},{},{},{}", r.iteration, r.seg, r.aux, r.total)
}

/// Appends loss rows, writing the header when the file is new.
pub fn append_losses(path: &Path, records: &[LossRecord]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(LOSS_HEADER);
        text.push('\n');
    }
    for r in records {
        text.push_str(&loss_row(r));
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

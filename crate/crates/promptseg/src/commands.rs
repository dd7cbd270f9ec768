//! The subcommands, usable without going through the argument parser.

use std::path::{Path, PathBuf};

use promptseg_core::metrics::{ConfusionAccumulator, MetricReport};
use promptseg_core::model::Model;
use promptseg_core::prompt::{extract_prompts, pattern_maps, PromptGenConfig};
use promptseg_core::synth::generate;
use promptseg_core::train::{LossRecord, Trainer};
use promptseg_core::{ImageTensor, LabelMap, RngHandle};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::dataset::{load_dataset, load_sample};
use crate::error::{CliError, Result};
use crate::imageio::{overlay, prompt_plot, read_mask, read_rgb, write_mask, write_rgb};
use crate::report;

pub type Sample = (ImageTensor, LabelMap);

const INFER_STREAM: u64 = 0x1f;
/// Largest tolerated `|F1 - 2 IoU / (1 + IoU)|` in evaluation reports.
pub const F1_IDENTITY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Samples of one split. Synthetic data draws `train_count + test_count`
/// scenes from one stream and splits them in order, so the splits never overlap.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let n = cfg.data.train_count + cfg.data.test_count;
            let mut all: Vec<Sample> = generate(&cfg.synthetic_spec(), n)?
                .into_iter()
                .map(|s| (s.image, s.labels))
                .collect();
            let test = all.split_off(cfg.data.train_count);
            Ok(if split == Split::Train { all } else { test })
        }
        DataSource::Directory => {
            let root = cfg.data.root.as_deref().ok_or_else(|| CliError::Config("data.root is not set".into()))?;
            let name = match split {
                Split::Train => &cfg.data.train_split,
                Split::Test => &cfg.data.test_split,
            };
            let records = load_dataset(root, name, cfg.model.num_classes)?;
            if records.is_empty() {
                return Err(CliError::load(root, format!("split '{name}' has no images")));
            }
            records.iter().map(|r| load_sample(r, cfg.data.image_size)).collect()
        }
    }
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: std::collections::BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn write_manifest(out_dir: &Path, command: &str, cfg: &RunConfig, outputs: &[PathBuf]) -> Result<()> {
    let doc = RunManifest {
        command,
        config: cfg.to_map(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Format(e.to_string()))?;
    report::write_text(&out_dir.join(format!("{command}.json")), &text)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

#[derive(Debug)]
pub struct TrainSummary {
    pub records: Vec<LossRecord>,
    pub checkpoint: PathBuf,
}

fn train_loop(trainer: &mut Trainer, data: &[Sample], until: u64, mut on_step: impl FnMut(&Trainer, &LossRecord) -> Result<()>) -> Result<Vec<LossRecord>> {
    let mut records = Vec::new();
    while trainer.iteration() < until {
        let rec = trainer.step_on(data)?;
        on_step(trainer, &rec)?;
        records.push(rec);
    }
    Ok(records)
}

fn snapshot(cfg: &RunConfig, trainer: &Trainer) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        params: trainer.model.params.clone(),
        state: trainer.state(),
    }
}

/// Trains on the train split, writing `losses.csv`, periodic
/// `checkpoint-NNNNNN.ckpt` files and a final `checkpoint.ckpt`.
///
/// With `resume`, training continues from that checkpoint using its
/// configuration; only `optim.iterations` and `checkpoint_every` are taken
/// from `cfg`. Continuing this way reproduces an uninterrupted run exactly.
pub fn train(cfg: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let (run_cfg, mut trainer) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut run_cfg = ckpt.config.clone();
            run_cfg.train.optim.iterations = cfg.train.optim.iterations;
            run_cfg.checkpoint_every = cfg.checkpoint_every;
            let trainer = Trainer::resume(ckpt.model()?, run_cfg.train, ckpt.state)?;
            (run_cfg, trainer)
        }
        None => {
            cfg.validate()?;
            let model = Model::new(cfg.model_config()?, cfg.seed)?;
            (cfg.clone(), Trainer::new(model, cfg.train, cfg.seed)?)
        }
    };
    let data = load_split(&run_cfg, Split::Train)?;
    if data.is_empty() {
        return Err(CliError::Config("the train split is empty".into()));
    }
    create_dir(out_dir)?;
    let losses = out_dir.join("losses.csv");
    let every = run_cfg.checkpoint_every as u64;
    let mut outputs = vec![losses.clone()];
    let mut pending = Vec::new();
    let records = train_loop(&mut trainer, &data, run_cfg.train.optim.iterations as u64, |t, rec| {
        pending.push(*rec);
        if every > 0 && t.iteration() % every == 0 {
            report::append_losses(&losses, &std::mem::take(&mut pending))?;
            let path = out_dir.join(format!("checkpoint-{:06}.ckpt", t.iteration()));
            snapshot(&run_cfg, t).save(&path)?;
            outputs.push(path);
        }
        Ok(())
    })?;
    if !pending.is_empty() || !losses.exists() {
        report::append_losses(&losses, &pending)?;
    }
    let checkpoint = out_dir.join("checkpoint.ckpt");
    snapshot(&run_cfg, &trainer).save(&checkpoint)?;
    outputs.push(checkpoint.clone());
    write_manifest(out_dir, "train", &run_cfg, &outputs)?;
    Ok(TrainSummary { records, checkpoint })
}

/// Trains in memory for `cfg.train.optim.iterations` steps.
pub fn train_model(cfg: &RunConfig, data: &[Sample]) -> Result<(Model, Vec<LossRecord>)> {
    cfg.validate()?;
    let model = Model::new(cfg.model_config()?, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train, cfg.seed)?;
    let records = train_loop(&mut trainer, data, cfg.train.optim.iterations as u64, |_, _| Ok(()))?;
    Ok((trainer.model, records))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Prompts extracted over all images.
    pub prompts: usize,
}

/// Confusion-based metrics of `model` over `data`.
pub fn evaluate_model(model: &Model, cfg: &RunConfig, data: &[Sample], seed: u64) -> Result<Evaluation> {
    let mut acc = ConfusionAccumulator::new(model.cfg.num_classes);
    let mut rng = RngHandle::new(seed, INFER_STREAM);
    let mut prompts = 0;
    for (image, labels) in data {
        let pred = model.predict(image, Some(labels), &mut rng)?;
        prompts += pred.prompts.iter().map(|p| p.len()).sum::<usize>();
        acc.accumulate(&pred.result.labels, labels)?;
    }
    Ok(Evaluation {
        report: acc.metrics(&cfg.metrics),
        prompts,
    })
}

#[derive(Debug)]
pub struct EvalSummary {
    pub evaluation: Evaluation,
    pub markdown: PathBuf,
    pub json: PathBuf,
}

/// Evaluates a checkpoint on its test split and writes `metrics.md` and `metrics.json`.
pub fn eval(ckpt: &Checkpoint, out_dir: &Path, seed: u64) -> Result<EvalSummary> {
    let data = load_split(&ckpt.config, Split::Test)?;
    let model = ckpt.model()?;
    let evaluation = evaluate_model(&model, &ckpt.config, &data, seed)?;
    let err = report::f1_identity_error(&evaluation.report);
    if err > F1_IDENTITY_TOL {
        return Err(CliError::Check(format!("F1 and IoU disagree by {err:e}")));
    }
    create_dir(out_dir)?;
    let markdown = out_dir.join("metrics.md");
    let json = out_dir.join("metrics.json");
    report::write_text(&markdown, &report::markdown_table(&evaluation.report))?;
    report::write_text(&json, &report::metrics_json(&evaluation.report)?)?;
    write_manifest(out_dir, "eval", &ckpt.config, &[markdown.clone(), json.clone()])?;
    Ok(EvalSummary {
        evaluation,
        markdown,
        json,
    })
}

#[derive(Debug)]
pub struct InferSummary {
    pub labels: PathBuf,
    pub diagnostics: PathBuf,
    pub overlay: Option<PathBuf>,
    pub prediction: promptseg_core::model::Prediction,
}

/// Segments one image. `mask` supplies ground truth for the oracle backbone.
pub fn infer(
    ckpt: &Checkpoint,
    image_path: &Path,
    mask: Option<&Path>,
    out_dir: &Path,
    with_overlay: bool,
    seed: u64,
) -> Result<InferSummary> {
    let image = read_rgb(image_path)?;
    let gt = mask.map(read_mask).transpose()?;
    let model = ckpt.model()?;
    let mut rng = RngHandle::new(seed, INFER_STREAM);
    let prediction = model.predict(&image, gt.as_ref(), &mut rng)?;
    create_dir(out_dir)?;
    let name = stem(image_path);
    let labels = out_dir.join(format!("{name}_labels.png"));
    write_mask(&labels, &prediction.result.labels)?;
    let diagnostics = out_dir.join(format!("{name}_diagnostics.json"));
    let text = serde_json::to_string_pretty(&report::diagnostics(&prediction))
        .map_err(|e| CliError::Format(e.to_string()))?;
    report::write_text(&diagnostics, &text)?;
    let mut outputs = vec![labels.clone(), diagnostics.clone()];
    let overlay_path = if with_overlay {
        let path = out_dir.join(format!("{name}_overlay.png"));
        write_rgb(&path, &overlay(&image, &prediction.result.labels, &prediction.prompts))?;
        outputs.push(path.clone());
        Some(path)
    } else {
        None
    };
    write_manifest(out_dir, "infer", &ckpt.config, &outputs)?;
    Ok(InferSummary {
        labels,
        diagnostics,
        overlay: overlay_path,
        prediction,
    })
}

/// Draws the extracted prompts of one image into `<stem>_prompts.png`.
pub fn viz_prompts(ckpt: &Checkpoint, image_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    let image = read_rgb(image_path)?;
    let model = ckpt.model()?;
    image.check_stride(model.stride())?;
    let (sem, _) = model.encode(&image)?;
    let maps = pattern_maps(&sem, &model.params.prompt_head)?;
    let prompts = extract_prompts(&maps, &model.cfg.prompt, sem.stride);
    create_dir(out_dir)?;
    let path = out_dir.join(format!("{}_prompts.png", stem(image_path)));
    write_rgb(&path, &prompt_plot(&image, &prompts))?;
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Prompt threshold `t`.
    T,
    /// Mask acceptance threshold `tau`.
    Tau,
    AlphaLoss,
}

impl SweepParam {
    pub const NAMES: [&'static str; 3] = ["t", "tau", "alpha_loss"];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "t" => Ok(Self::T),
            "tau" => Ok(Self::Tau),
            "alpha_loss" => Ok(Self::AlphaLoss),
            _ => Err(CliError::Config(format!(
                "unknown sweep parameter '{name}' (expected one of {})",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::T => "t",
            Self::Tau => "tau",
            Self::AlphaLoss => "alpha_loss",
        }
    }

    pub fn config_key(self) -> &'static str {
        match self {
            Self::T => "prompt.threshold",
            Self::Tau => "gfs.mask_threshold",
            Self::AlphaLoss => "loss.alpha",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_iou: Option<f64>,
    pub mean_f1: Option<f64>,
    pub prompts: usize,
    pub final_loss: Option<f64>,
}

/// Test-set prompt counts of a fixed model at each threshold.
pub fn prompt_counts(model: &Model, data: &[Sample], thresholds: &[f64]) -> Result<Vec<usize>> {
    let mut counts = vec![0; thresholds.len()];
    for (image, _) in data {
        let (sem, _) = model.encode(image)?;
        let maps = pattern_maps(&sem, &model.params.prompt_head)?;
        for (count, &t) in counts.iter_mut().zip(thresholds) {
            let cfg = PromptGenConfig {
                threshold: t,
                ..model.cfg.prompt
            };
            *count += extract_prompts(&maps, &cfg, sem.stride).iter().map(|p| p.len()).sum::<usize>();
        }
    }
    Ok(counts)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One train and evaluation per grid value, all from the same seed, written
/// to `sweep.csv`. Sweeping `t` also checks that, for every trained model,
/// raising the threshold never adds prompts.
pub fn sweep(cfg: &RunConfig, param: SweepParam, grid: &[f64], out_dir: &Path) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(CliError::Config("the sweep grid is empty".into()));
    }
    let mut configs = Vec::with_capacity(grid.len());
    for &v in grid {
        let mut c = cfg.clone();
        c.set(param.config_key(), &v.to_string())?;
        c.validate()?;
        configs.push(c);
    }
    let train_data = load_split(cfg, Split::Train)?;
    let test_data = load_split(cfg, Split::Test)?;
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    create_dir(out_dir)?;
    let mut rows = Vec::with_capacity(grid.len());
    let mut csv = String::from("param,value,mean_iou,mean_f1,prompts,final_loss\n");
    for (c, &value) in configs.iter().zip(grid) {
        let (model, records) = train_model(c, &train_data)?;
        let evaluation = evaluate_model(&model, c, &test_data, c.seed)?;
        if param == SweepParam::T {
            let counts = prompt_counts(&model, &test_data, &sorted)?;
            if counts.windows(2).any(|w| w[1] > w[0]) {
                return Err(CliError::Check(format!(
                    "prompt counts {counts:?} increase with the threshold over {sorted:?}"
                )));
            }
        }
        let row = SweepRow {
            value,
            mean_iou: evaluation.report.mean_iou,
            mean_f1: evaluation.report.mean_f1,
            prompts: evaluation.prompts,
            final_loss: records.last().map(|r| r.total),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            param.name(),
            value,
            fmt_opt(row.mean_iou),
            fmt_opt(row.mean_f1),
            row.prompts,
            fmt_opt(row.final_loss)
        ));
        rows.push(row);
    }
    let path = out_dir.join("sweep.csv");
    report::write_text(&path, &csv)?;
    write_manifest(out_dir, "sweep", cfg, &[path])?;
    Ok(rows)
}

//! Flat `key = value` run configuration with dotted keys.
//!
//! Lines starting with `#` are comments. Every key has a default, so an empty
//! file is a valid configuration. Unknown keys are rejected together in one
//! error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use promptseg_core::adapter::InitScheme;
use promptseg_core::backbone::{backbone_from_name, DecoderKind};
use promptseg_core::gfs::{ScoreMode, Selection};
use promptseg_core::metrics::{MetricOptions, UndefinedClass};
use promptseg_core::model::ModelConfig;
use promptseg_core::synth::SyntheticSpec;
use promptseg_core::train::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset root for [`DataSource::Directory`].
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub test_split: String,
    /// Side length images are generated at or center-cropped to.
    pub image_size: usize,
    pub train_count: usize,
    pub test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: None,
            train_split: "train".into(),
            test_split: "test".into(),
            image_size: 224,
            train_count: 64,
            test_count: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: String,
    pub data: DataConfig,
    /// Scene parameters; size, class count and seed come from the other sections.
    pub synth: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    pub metrics: MetricOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: "toy".into(),
            data: DataConfig::default(),
            synth: SyntheticSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            checkpoint_every: 500,
            metrics: MetricOptions::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("invalid value '{value}' for {key} (expected true or false)"))),
    }
}

fn parse_choice<T: Copy>(key: &str, value: &str, choices: &[(&str, T)]) -> Result<T> {
    choices
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<_> = choices.iter().map(|(n, _)| *n).collect();
            CliError::Config(format!("invalid value '{value}' for {key} (expected one of {})", names.join(", ")))
        })
}

fn choice_name<T: Copy + PartialEq>(value: T, choices: &[(&'static str, T)]) -> &'static str {
    choices.iter().find(|(_, v)| *v == value).map(|(n, _)| *n).unwrap_or("?")
}

const SOURCES: [(&str, DataSource); 2] = [("synthetic", DataSource::Synthetic), ("directory", DataSource::Directory)];
const INITS: [(&str, InitScheme); 2] = [("zero_up", InitScheme::ZeroUp), ("small_gaussian", InitScheme::SmallGaussian)];
const SELECTIONS: [(&str, Selection); 2] = [("filtered", Selection::Filtered), ("dense", Selection::Dense)];
const SCORE_MODES: [(&str, ScoreMode); 2] = [("fused", ScoreMode::Fused), ("iou_only", ScoreMode::IouOnly)];
const UNDEFINED: [(&str, UndefinedClass); 2] = [("exclude", UndefinedClass::Exclude), ("zero", UndefinedClass::Zero)];

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        let mut unknown = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), n + 1).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
            match cfg.set(key, value) {
                Err(CliError::Config(msg)) if msg.starts_with("unknown config key") => unknown.push(key.to_string()),
                other => other?,
            }
        }
        if !unknown.is_empty() {
            return Err(CliError::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Sets one dotted key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.synth;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "backbone" => {
                backbone_from_name(value)?;
                self.backbone = value.into();
            }
            "data.source" => self.data.source = parse_choice(key, value, &SOURCES)?,
            "data.root" => self.data.root = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.train_split" => self.data.train_split = value.into(),
            "data.test_split" => self.data.test_split = value.into(),
            "data.image_size" => self.data.image_size = parse(key, value)?,
            "data.train_count" => self.data.train_count = parse(key, value)?,
            "data.test_count" => self.data.test_count = parse(key, value)?,
            "synth.blobs_min" => s.blobs_per_class.0 = parse(key, value)?,
            "synth.blobs_max" => s.blobs_per_class.1 = parse(key, value)?,
            "synth.radius_min" => s.radius.0 = parse(key, value)?,
            "synth.radius_max" => s.radius.1 = parse(key, value)?,
            "synth.texture" => s.texture_amplitude = parse(key, value)?,
            "synth.appearance_shift" => s.appearance_shift = parse(key, value)?,
            "synth.noise" => s.noise = parse(key, value)?,
            "model.num_classes" => m.num_classes = parse(key, value)?,
            "model.stride" => m.encoder.stride = parse(key, value)?,
            "model.channels" => m.encoder.channels = parse(key, value)?,
            "model.blocks" => m.encoder.blocks = parse(key, value)?,
            "model.hidden_mult" => m.encoder.hidden_mult = parse(key, value)?,
            "model.decoder_dim" => m.decoder_dim = parse(key, value)?,
            "model.semantic_adapters" => m.semantic_adapters = parse_bool(key, value)?,
            "model.geometric_adapters" => m.geometric_adapters = parse_bool(key, value)?,
            "adapter.bottleneck_ratio" => m.adapter.bottleneck_ratio = parse(key, value)?,
            "adapter.init" => m.adapter.init_scheme = parse_choice(key, value, &INITS)?,
            "prompt.threshold" => m.prompt.threshold = parse(key, value)?,
            "prompt.max_per_category" => m.prompt.max_prompts_per_category = parse(key, value)?,
            "gfs.mask_threshold" => m.gfs.mask_threshold = parse(key, value)?,
            "gfs.batch_size" => m.gfs.batch_size = parse(key, value)?,
            "gfs.selection" => m.gfs.selection = parse_choice(key, value, &SELECTIONS)?,
            "gfs.score_mode" => m.gfs.score_mode = parse_choice(key, value, &SCORE_MODES)?,
            "oracle.noise" => m.oracle_noise = parse(key, value)?,
            "eval.bg_threshold" => m.bg_threshold = parse(key, value)?,
            "eval.include_background" => self.metrics.include_background = parse_bool(key, value)?,
            "eval.undefined" => self.metrics.undefined = parse_choice(key, value, &UNDEFINED)?,
            "loss.alpha" => t.loss.alpha_loss = parse(key, value)?,
            "loss.ce_weight" => t.loss.ce_weight = parse(key, value)?,
            "loss.dice_weight" => t.loss.dice_weight = parse(key, value)?,
            "loss.dice_smooth" => t.loss.dice_smooth = parse(key, value)?,
            "optim.lr" => t.optim.learning_rate = parse(key, value)?,
            "optim.weight_decay" => t.optim.weight_decay = parse(key, value)?,
            "optim.beta1" => t.optim.beta1 = parse(key, value)?,
            "optim.beta2" => t.optim.beta2 = parse(key, value)?,
            "optim.eps" => t.optim.eps = parse(key, value)?,
            "optim.iterations" => t.optim.iterations = parse(key, value)?,
            "optim.batch_size" => t.optim.batch_size = parse(key, value)?,
            "train.mask_threshold" => t.mask_threshold = parse(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(CliError::Config(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        fn v(x: impl Display) -> String {
            x.to_string()
        }
        let m = &self.model;
        let s = &self.synth;
        let t = &self.train;
        vec![
            ("seed", v(self.seed)),
            ("backbone", self.backbone.clone()),
            ("data.source", v(choice_name(self.data.source, &SOURCES))),
            ("data.root", self.data.root.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("data.train_split", self.data.train_split.clone()),
            ("data.test_split", self.data.test_split.clone()),
            ("data.image_size", v(self.data.image_size)),
            ("data.train_count", v(self.data.train_count)),
            ("data.test_count", v(self.data.test_count)),
            ("synth.blobs_min", v(s.blobs_per_class.0)),
            ("synth.blobs_max", v(s.blobs_per_class.1)),
            ("synth.radius_min", v(s.radius.0)),
            ("synth.radius_max", v(s.radius.1)),
            ("synth.texture", v(s.texture_amplitude)),
            ("synth.appearance_shift", v(s.appearance_shift)),
            ("synth.noise", v(s.noise)),
            ("model.num_classes", v(m.num_classes)),
            ("model.stride", v(m.encoder.stride)),
            ("model.channels", v(m.encoder.channels)),
            ("model.blocks", v(m.encoder.blocks)),
            ("model.hidden_mult", v(m.encoder.hidden_mult)),
            ("model.decoder_dim", v(m.decoder_dim)),
            ("model.semantic_adapters", v(m.semantic_adapters)),
            ("model.geometric_adapters", v(m.geometric_adapters)),
            ("adapter.bottleneck_ratio", v(m.adapter.bottleneck_ratio)),
            ("adapter.init", v(choice_name(m.adapter.init_scheme, &INITS))),
            ("prompt.threshold", v(m.prompt.threshold)),
            ("prompt.max_per_category", v(m.prompt.max_prompts_per_category)),
            ("gfs.mask_threshold", v(m.gfs.mask_threshold)),
            ("gfs.batch_size", v(m.gfs.batch_size)),
            ("gfs.selection", v(choice_name(m.gfs.selection, &SELECTIONS))),
            ("gfs.score_mode", v(choice_name(m.gfs.score_mode, &SCORE_MODES))),
            ("oracle.noise", v(m.oracle_noise)),
            ("eval.bg_threshold", v(m.bg_threshold)),
            ("eval.include_background", v(self.metrics.include_background)),
            ("eval.undefined", v(choice_name(self.metrics.undefined, &UNDEFINED))),
            ("loss.alpha", v(t.loss.alpha_loss)),
            ("loss.ce_weight", v(t.loss.ce_weight)),
            ("loss.dice_weight", v(t.loss.dice_weight)),
            ("loss.dice_smooth", v(t.loss.dice_smooth)),
            ("optim.lr", v(t.optim.learning_rate)),
            ("optim.weight_decay", v(t.optim.weight_decay)),
            ("optim.beta1", v(t.optim.beta1)),
            ("optim.beta2", v(t.optim.beta2)),
            ("optim.eps", v(t.optim.eps)),
            ("optim.iterations", v(t.optim.iterations)),
            ("optim.batch_size", v(t.optim.batch_size)),
            ("train.mask_threshold", v(t.mask_threshold)),
            ("train.checkpoint_every", v(self.checkpoint_every)),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn decoder_kind(&self) -> Result<DecoderKind> {
        Ok(backbone_from_name(&self.backbone)?)
    }

    /// Model configuration with the run seed and backbone applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            encoder_seed: self.seed,
            decoder: self.decoder_kind()?,
            ..self.model.clone()
        })
    }

    /// Synthetic scene spec with the run seed, size and class count applied.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            height: self.data.image_size,
            width: self.data.image_size,
            num_classes: self.model.num_classes,
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        self.train.validate()?;
        self.synthetic_spec().validate()?;
        let stride = self.model.encoder.stride;
        if self.data.image_size == 0 || !self.data.image_size.is_multiple_of(stride) {
            return Err(CliError::Config(format!(
                "data.image_size {} must be a positive multiple of model.stride {stride}",
                self.data.image_size
            )));
        }
        if self.data.source == DataSource::Directory && self.data.root.is_none() {
            return Err(CliError::Config("data.source = directory needs data.root".into()));
        }
        Ok(())
    }
}

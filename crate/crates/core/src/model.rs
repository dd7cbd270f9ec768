//! The assembled pipeline: frozen encoders, trainable heads and inference.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterParams};
use crate::backbone::{
    DecoderKind, GeometricEncoder, OracleDecoder, PromptDecoder, SemanticEncoder, ToyDecoderParams,
    ToyEncoder, ToyEncoderConfig, ToyPromptDecoder,
};
use crate::error::{config_err, usage_err, Result};
use crate::gfs::{self, CategoryMaskSet, GfsConfig, ScorerParams};
use crate::mask::LabelMap;
use crate::params::{prefixed, NamedTensor, Parameters};
use crate::prompt::{self, PromptGenConfig, PromptHeadParams};
use crate::rng::RngHandle;
use crate::types::{DenseFeature, ImageTensor, PatternMap, PromptSet, SegmentationResult};

/// Everything needed to rebuild a model besides its trainable values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub encoder: ToyEncoderConfig,
    /// Seed of the frozen encoder weights.
    pub encoder_seed: u64,
    pub adapter: AdapterConfig,
    pub semantic_adapters: bool,
    pub geometric_adapters: bool,
    pub decoder: DecoderKind,
    pub decoder_dim: usize,
    /// Boundary corruption rate of the oracle decoder.
    pub oracle_noise: f64,
    pub prompt: PromptGenConfig,
    pub gfs: GfsConfig,
    pub bg_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            encoder: ToyEncoderConfig::default(),
            encoder_seed: 0,
            adapter: AdapterConfig::default(),
            semantic_adapters: true,
            geometric_adapters: true,
            decoder: DecoderKind::ToyDecoder,
            decoder_dim: 16,
            oracle_noise: 0.0,
            prompt: PromptGenConfig::default(),
            gfs: GfsConfig::default(),
            bg_threshold: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=255).contains(&self.num_classes) {
            return Err(config_err!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if !(0.0..=1.0).contains(&self.bg_threshold) {
            return Err(config_err!("bg_threshold {} outside [0, 1]", self.bg_threshold));
        }
        if !(0.0..=1.0).contains(&self.oracle_noise) {
            return Err(config_err!("oracle noise {} outside [0, 1]", self.oracle_noise));
        }
        self.prompt.validate()?;
        self.gfs.validate()?;
        self.adapter.bottleneck(self.encoder.channels)?;
        Ok(())
    }
}

/// All trainable tensors of the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainableParams {
    pub semantic_adapters: Vec<AdapterParams>,
    pub geometric_adapters: Vec<AdapterParams>,
    pub prompt_head: PromptHeadParams,
    pub scorer: ScorerParams,
    pub decoder: ToyDecoderParams,
}

impl TrainableParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let c = cfg.encoder.channels;
        let mut rng = RngHandle::new(seed, 0x7a1);
        let adapters = |on: bool, rng: &mut RngHandle| -> Result<Vec<AdapterParams>> {
            if !on {
                return Ok(Vec::new());
            }
            (0..cfg.encoder.blocks)
                .map(|_| AdapterParams::init(c, &cfg.adapter, rng))
                .collect()
        };
        let semantic_adapters = adapters(cfg.semantic_adapters, &mut rng)?;
        let geometric_adapters = adapters(cfg.geometric_adapters, &mut rng)?;
        Ok(Self {
            semantic_adapters,
            geometric_adapters,
            prompt_head: PromptHeadParams::init(c, cfg.num_classes, &mut rng),
            scorer: ScorerParams::init(c, cfg.num_classes, &mut rng),
            decoder: ToyDecoderParams::init(c, cfg.decoder_dim, &mut rng)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            semantic_adapters: self.semantic_adapters.iter().map(AdapterParams::zeros_like).collect(),
            geometric_adapters: self.geometric_adapters.iter().map(AdapterParams::zeros_like).collect(),
            prompt_head: self.prompt_head.zeros_like(),
            scorer: self.scorer.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }
}

impl Parameters for TrainableParams {
    fn named(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for (i, a) in self.semantic_adapters.iter().enumerate() {
            out.extend(prefixed(&format!("adapter.semantic.{i}"), a.named()));
        }
        for (i, a) in self.geometric_adapters.iter().enumerate() {
            out.extend(prefixed(&format!("adapter.geometric.{i}"), a.named()));
        }
        out.extend(prefixed("prompt_head", self.prompt_head.named()));
        out.extend(prefixed("scorer", self.scorer.named()));
        out.extend(prefixed("decoder", self.decoder.named()));
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for a in &mut self.semantic_adapters {
            out.extend(a.slices_mut());
        }
        for a in &mut self.geometric_adapters {
            out.extend(a.slices_mut());
        }
        out.extend(self.prompt_head.slices_mut());
        out.extend(self.scorer.slices_mut());
        out.extend(self.decoder.slices_mut());
        out
    }
}

/// Output of one inference pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub maps: PatternMap,
    pub prompts: Vec<PromptSet>,
    pub sets: Vec<CategoryMaskSet>,
    pub result: SegmentationResult,
}

/// Frozen encoders plus trainable parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    semantic: ToyEncoder,
    geometric: ToyEncoder,
    pub params: TrainableParams,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = TrainableParams::init(&cfg, seed)?;
        Self::from_params(cfg, params)
    }

    /// Rebuilds the frozen encoders from the config and attaches `params`.
    pub fn from_params(cfg: ModelConfig, params: TrainableParams) -> Result<Self> {
        cfg.validate()?;
        let semantic = ToyEncoder::new(cfg.encoder, cfg.encoder_seed)?;
        let geometric = ToyEncoder::new(cfg.encoder, cfg.encoder_seed ^ 0x9e37_79b9_7f4a_7c15)?;
        let expect = |on: bool| if on { cfg.encoder.blocks } else { 0 };
        if params.semantic_adapters.len() != expect(cfg.semantic_adapters)
            || params.geometric_adapters.len() != expect(cfg.geometric_adapters)
        {
            return Err(config_err!("adapter count does not match the model config"));
        }
        let c = cfg.encoder.channels;
        if params.prompt_head.channels != c
            || params.prompt_head.num_classes != cfg.num_classes
            || params.scorer.channels != c
            || params.scorer.num_classes != cfg.num_classes
            || params.decoder.channels != c
        {
            return Err(config_err!("head shapes do not match the model config"));
        }
        Ok(Self {
            cfg,
            semantic,
            geometric,
            params,
        })
    }

    pub fn semantic_encoder(&self) -> &ToyEncoder {
        &self.semantic
    }

    pub fn geometric_encoder(&self) -> &ToyEncoder {
        &self.geometric
    }

    pub fn stride(&self) -> usize {
        self.cfg.encoder.stride
    }

    /// Semantic and geometric features of `image`.
    pub fn encode(&self, image: &ImageTensor) -> Result<(DenseFeature, DenseFeature)> {
        let sem = self.semantic.encode_semantic(image, &self.params.semantic_adapters)?;
        let geo = self.geometric.encode_geometric(image, &self.params.geometric_adapters)?;
        Ok((sem, geo))
    }

    /// The configured decoder. The oracle needs the ground-truth labels.
    pub fn decoder<'a>(
        &'a self,
        labels: Option<&LabelMap>,
        rng: &mut RngHandle,
    ) -> Result<Box<dyn PromptDecoder + 'a>> {
        match self.cfg.decoder {
            DecoderKind::ToyDecoder => Ok(Box::new(ToyPromptDecoder::new(&self.params.decoder))),
            DecoderKind::Oracle => {
                let labels = labels.ok_or_else(|| usage_err!("the oracle decoder needs ground-truth labels"))?;
                let oracle_rng = RngHandle::new(rng.next_u64(), 0x0a);
                Ok(Box::new(OracleDecoder::new(labels.clone(), self.cfg.oracle_noise, oracle_rng)))
            }
        }
    }

    /// Prompt generation and feedback segmentation on precomputed features.
    pub fn segment(
        &self,
        sem: &DenseFeature,
        geo: &DenseFeature,
        decoder: &mut dyn PromptDecoder,
        rng: &mut RngHandle,
    ) -> Result<Prediction> {
        self.segment_with(sem, geo, decoder, &self.cfg.gfs, rng)
    }

    /// [`Model::segment`] with a different feedback-loop configuration.
    pub fn segment_with(
        &self,
        sem: &DenseFeature,
        geo: &DenseFeature,
        decoder: &mut dyn PromptDecoder,
        gfs_cfg: &GfsConfig,
        rng: &mut RngHandle,
    ) -> Result<Prediction> {
        let maps = prompt::pattern_maps(sem, &self.params.prompt_head)?;
        let prompts = prompt::extract_prompts(&maps, &self.cfg.prompt, sem.stride);
        let base = rng.next_u64();
        let sets = prompts
            .iter()
            .map(|ps| {
                let mut crng = RngHandle::new(base, ps.category as u64);
                gfs::decode_category(geo, sem, ps, decoder, &self.params.scorer, gfs_cfg, &mut crng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (h, w) = sem.image_size();
        let result = gfs::aggregate(&sets, self.cfg.num_classes, h, w, self.cfg.bg_threshold)?;
        Ok(Prediction {
            maps,
            prompts,
            sets,
            result,
        })
    }

    /// Full inference. `labels` is only read by the oracle decoder.
    pub fn predict(&self, image: &ImageTensor, labels: Option<&LabelMap>, rng: &mut RngHandle) -> Result<Prediction> {
        image.check_stride(self.stride())?;
        let (sem, geo) = self.encode(image)?;
        let mut decoder = self.decoder(labels, rng)?;
        self.segment(&sem, &geo, decoder.as_mut(), rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            encoder: ToyEncoderConfig {
                stride: 4,
                channels: 8,
                blocks: 2,
                hidden_mult: 2,
            },
            decoder_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn parameter_names_are_unique_and_flatten_round_trips() {
        let mut m = Model::new(small_cfg(), 3).unwrap();
        let names: Vec<_> = m.params.named().into_iter().map(|t| t.name).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        let flat = m.params.flatten();
        let before = m.params.clone();
        m.params.assign_flat(&flat);
        assert_eq!(m.params, before);
    }

    #[test]
    fn prediction_is_deterministic() {
        let m = Model::new(small_cfg(), 1).unwrap();
        let mut rng = RngHandle::new(4, 0);
        let px = (0..16 * 16 * 3).map(|_| rng.uniform()).collect();
        let img = ImageTensor::new(16, 16, px).unwrap();
        let a = m.predict(&img, None, &mut RngHandle::new(9, 0)).unwrap();
        let b = m.predict(&img, None, &mut RngHandle::new(9, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_needs_labels() {
        let cfg = ModelConfig {
            decoder: DecoderKind::Oracle,
            ..small_cfg()
        };
        let m = Model::new(cfg, 0).unwrap();
        let img = ImageTensor::new(16, 16, alloc::vec![0.5; 16 * 16 * 3]).unwrap();
        assert!(m.predict(&img, None, &mut RngHandle::new(0, 0)).is_err());
    }
}

//! Encoder and decoder interfaces plus the desk-scale implementations behind them.
//!
//! The pipeline only talks to [`SemanticEncoder`], [`GeometricEncoder`] and
//! [`PromptDecoder`]; pretrained backbones can be slotted in behind the same
//! traits. When the two branches use different strides, a real plug-in is
//! expected to resample its geometric grid bilinearly onto the semantic grid
//! before handing it to the decoder. The toy encoders share one stride, so no
//! resampling happens here.

mod decoder;
mod encoder;
mod oracle;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use decoder::{ToyDecoderCache, ToyDecoderParams, ToyPromptDecoder};
pub use encoder::{EncoderCache, ToyEncoder, ToyEncoderConfig};
pub use oracle::{OracleDecoder, ORACLE_BAND_RADIUS};

use crate::adapter::AdapterParams;
use crate::error::{usage_err, Error, Result};
use crate::mask::BitMask;
use crate::types::{Branch, DenseFeature, ImageTensor, PointPrompt};

/// Semantic feature extractor (the category-aware branch).
pub trait SemanticEncoder {
    fn stride(&self) -> usize;
    fn channels(&self) -> usize;
    fn insertion_points(&self) -> usize;
    /// Encodes `image`; an empty adapter list runs the bare backbone.
    fn encode_semantic(&self, image: &ImageTensor, adapters: &[AdapterParams])
        -> Result<DenseFeature>;
}

/// Geometric feature extractor (the boundary-aware branch).
pub trait GeometricEncoder {
    fn stride(&self) -> usize;
    fn channels(&self) -> usize;
    fn insertion_points(&self) -> usize;
    fn encode_geometric(
        &self,
        image: &ImageTensor,
        adapters: &[AdapterParams],
    ) -> Result<DenseFeature>;
}

/// One decoded candidate: a binary mask at image resolution and its predicted quality.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedMask {
    pub mask: BitMask,
    pub score: f64,
}

/// Promptable mask decoder: one mask and one quality score per prompt.
pub trait PromptDecoder {
    /// Decodes each prompt independently, in batch order.
    fn decode(&mut self, feat: &DenseFeature, batch: &[PointPrompt]) -> Result<Vec<DecodedMask>>;
}

/// Shared precondition check for decoders.
pub fn check_decode_batch(feat: &DenseFeature, batch: &[PointPrompt]) -> Result<()> {
    feat.expect_source(Branch::Geometric)?;
    let Some(first) = batch.first() else {
        return Err(usage_err!("decode called with an empty prompt batch"));
    };
    if batch.iter().any(|p| p.category != first.category) {
        return Err(usage_err!("a decode batch must hold a single category"));
    }
    let (h, w) = feat.image_size();
    if let Some(p) = batch.iter().find(|p| p.x >= w || p.y >= h) {
        return Err(usage_err!(
            "prompt ({}, {}) outside the {h}x{w} image",
            p.x,
            p.y
        ));
    }
    Ok(())
}

/// Decoder selected by name in a run configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    /// Trainable toy head ([`ToyPromptDecoder`]).
    ToyDecoder,
    /// Ground-truth oracle ([`OracleDecoder`]); needs labels at run time.
    Oracle,
}

/// Names reserved for pretrained backbones that this build does not ship.
pub const RESERVED_BACKBONES: [&str; 3] = ["dinov2-sam", "dinov2", "sam"];

/// Resolves a backbone name: `toy` and `toy-decoder` pair the toy encoders with
/// the trainable decoder, `oracle` pairs them with the ground-truth decoder.
pub fn backbone_from_name(name: &str) -> Result<DecoderKind> {
    match name {
        "toy" | "toy-decoder" => Ok(DecoderKind::ToyDecoder),
        "oracle" => Ok(DecoderKind::Oracle),
        n if RESERVED_BACKBONES.contains(&n) => Err(Error::Config(format!(
            "backbone '{n}' needs pretrained weights, which this build does not include"
        ))),
        n => Err(Error::Config(format!(
            "unknown backbone '{n}' (expected toy, toy-decoder or oracle)"
        ))),
    }
}

impl DecoderKind {
    pub fn name(&self) -> &'static str {
        match self {
            DecoderKind::ToyDecoder => "toy-decoder",
            DecoderKind::Oracle => "oracle",
        }
    }
}

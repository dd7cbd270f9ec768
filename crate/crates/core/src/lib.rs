//! Allocation-only core of a point-prompt segmentation pipeline.
//!
//! Two frozen encoders feed the pipeline: a semantic branch whose features are
//! turned into per-category pattern maps and dense point prompts, and a
//! geometric branch whose features drive a promptable mask decoder. Residual
//! adapters recalibrate both branches. A feedback loop decodes sampled prompt
//! batches, ranks candidate masks by the product of the decoder's quality score
//! and a mask-pooled semantic score, keeps the best mask per batch, prunes the
//! prompts it covers and finally max-aggregates the accepted masks into
//! per-category response maps.
//!
//! The crate is `no_std` and only needs `alloc`; file formats, image IO and the
//! command line live in the `promptseg` companion crate.

#![no_std]

extern crate alloc;

pub mod adapter;
pub mod backbone;
pub mod error;
pub mod gfs;
pub mod loss;
pub mod mask;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use mask::{BitMask, LabelMap};
pub use rng::RngHandle;
pub use tensor::Grid;
pub use types::{
    argmax_labels, Branch, DenseFeature, ImageTensor, PatternMap, PointPrompt, PromptSet,
    ScoredMask, SegmentationResult, BACKGROUND,
};

/// Default absolute tolerance for floating-point comparisons.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

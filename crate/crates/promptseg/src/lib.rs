//! Command-line, file formats and run orchestration for prompt-driven segmentation.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod report;

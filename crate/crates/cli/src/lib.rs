//! Command-line driver for the multi-beam SAR pipeline: configuration,
//! pipeline stages with on-disk artifacts, and a focusing benchmark.

pub mod bench;
pub mod config;
pub mod error;
pub mod pipeline;

//! Frozen-backbone image classifiers fused by weighted soft voting.
//!
//! The crate covers the whole experiment pipeline:
//!
//! - [`labels`]: class vocabulary, id assignment and crop grouping
//! - [`data`]: stratified split manifests, image loading and preprocessing
//! - [`model`]: backbone providers, frozen feature extractors and linear heads
//! - [`train`]: head-only training with Adam and cross-entropy
//! - [`ensemble`]: soft voting over cached probability matrices
//! - [`metrics`]: confusion matrices, per-class and per-crop reports
//! - [`bench`]: per-image latency and FPS measurement
//! - [`ablation`]: the singleton / pair / weighting-scheme grid
//! - [`pipeline`] and [`figures`]: end-to-end runs and report artifacts
//!
//! Data-parallel loops go through [`par::Exec`]. With the default `parallel`
//! feature they run on rayon; without it every path is sequential.

pub mod ablation;
pub mod bench;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod figures;
pub mod fixture;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod train;

mod hashing;

pub use error::{Error, Result};

/// Version string recorded in run summaries.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

//! GAATNet: link prediction on undirected graphs via a two-stage
//! pretrain/fine-tune pipeline.
//!
//! The crate is organized bottom-up:
//!
//! - [`graph`]: immutable graph representation, edge splitting, negative
//!   sampling, distant-neighbor sampling, and feature diffusion.
//! - [`node2vec`]: biased random walks + skip-gram with negative sampling,
//!   producing the initial embedding matrix.
//! - [`autodiff`]: dense f64 tensors with recorded reverse-mode gradients.
//! - [`optim`]: named parameter registry, freeze flags, and Adam.
//! - [`layers`]: multi-head GAT, distant-neighbor bias, biased transformer
//!   encoder, residual self-adapter, and the attention-enhancement head.
//! - [`objective`]: link scoring, BCE + InfoNCE losses.
//! - [`metrics`]: AUC / F1 / AP and the metrics record format.
//! - [`checkpoint`]: binary named-tensor container and model checkpoints.
//! - [`config`]: run configuration (flat key=value file format).
//! - [`pipeline`]: pretraining, fine-tune assembly, training loops,
//!   evaluation, and multi-seed aggregation.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod node2vec;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
pub use graph::{EdgeSplit, Graph};

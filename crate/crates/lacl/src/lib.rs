//! Lesion-aware contrastive pretraining for whole-slide image patches.
//!
//! The crate trains a small siamese encoder with a momentum key branch,
//! class-partitioned FIFO negative queues, and a KL-based key selection rule
//! that filters which keys are admitted to the queues. Alongside training it
//! provides synthetic patch dataset generation, feature extraction, linear
//! and k-NN probes, slide-level aggregation, and self-check oracles for the
//! gradient, queue, and selection subsystems.

pub mod check;
pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
mod fsio;
pub mod loss;
pub mod manifest;
pub mod math;
pub mod model;
pub mod qrs;
pub mod queue;
pub mod trainer;

pub use error::{Error, Result};
pub use fsio::write_atomic;

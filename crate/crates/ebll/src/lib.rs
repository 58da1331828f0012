//! Lifelong-learning laboratory: one shared model trained over a sequence of
//! classification tasks, with per-task undercomplete autoencoders preserving
//! the feature submanifold earlier tasks rely on, compared head-to-head
//! against finetuning, feature extraction, distillation-only training, and
//! joint training.

pub mod analysis;
pub mod autoencoder;
mod batch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod lifelong;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

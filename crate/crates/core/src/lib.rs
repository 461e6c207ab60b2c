//! Multimodal multitask learning engine.
//!
//! Pipeline: per-modality feedforward encoders feed a contrastive
//! alignment term and a shared fusion trunk; task heads exchange
//! information through a cross-task attention block before per-task
//! output layers. A separate autoencoder + k-means path clusters the
//! raw fused embeddings. Task-interaction scores quantify how much
//! each pair of tasks helps one task's performance, and a greedy
//! search picks task subsets worth training together.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
mod ioutil;
pub mod model;
pub mod numerics;
pub mod seeding;
pub mod tim;
pub mod training;

pub use error::{Error, Result};

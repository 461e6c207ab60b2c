//! Network definition, attention, clustering, and checkpointing.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod kmeans;
pub mod net;

pub use attention::{cross_task_attention, AttentionOutput, AttentionParams};
pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use kmeans::{kmeans, KMeansResult, DEFAULT_RESTARTS};
pub use net::{contrastive_loss, per_element, Model, SummedGraph, TaskOutput, TermGraph};

#[cfg(test)]
mod tests;

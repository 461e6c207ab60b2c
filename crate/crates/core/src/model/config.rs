//! Network hyperparameters with desk-scale defaults.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Widths and scalars for every stage of the network. Activations are
/// rectified-linear throughout the trunk and heads; projection,
/// latent, reconstruction, and output layers are linear (outputs get
/// their class-specific link instead).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Hidden widths of each modality net (input -> ... -> last).
    pub modality_hidden: Vec<usize>,
    /// Hidden widths of the shared net after concatenation.
    pub shared_hidden: Vec<usize>,
    /// Task embedding / attention feature width (head output).
    pub n_feature: usize,
    /// Contrastive projection width.
    pub contrastive_proj_dim: usize,
    /// Contrastive temperature tau.
    pub contrastive_temperature: f64,
    /// Cross-exploration strength alpha.
    pub alpha: f64,
    /// Autoencoder hidden width.
    pub autoencoder_hidden: usize,
    /// Autoencoder latent width.
    pub autoencoder_latent: usize,
    /// Initialization seed; per-tensor streams are derived from it.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modality_hidden: vec![256, 128],
            shared_hidden: vec![256, 128],
            n_feature: 64,
            contrastive_proj_dim: 64,
            contrastive_temperature: 0.1,
            alpha: 0.1,
            autoencoder_hidden: 512,
            autoencoder_latent: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modality_hidden.is_empty() || self.shared_hidden.is_empty() {
            return Err(Error::Contract(
                "modality and shared nets need at least one layer".into(),
            ));
        }
        let widths = self
            .modality_hidden
            .iter()
            .chain(&self.shared_hidden)
            .chain([
                &self.n_feature,
                &self.contrastive_proj_dim,
                &self.autoencoder_hidden,
                &self.autoencoder_latent,
            ]);
        for &w in widths {
            if w == 0 {
                return Err(Error::Contract("all layer widths must be >= 1".into()));
            }
        }
        if !(self.contrastive_temperature > 0.0) {
            return Err(Error::Contract(format!(
                "contrastive temperature {} must be > 0",
                self.contrastive_temperature
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Contract(format!(
                "alpha {} must be >= 0",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Width of the modality-net output (shared-net input is this
    /// times the modality count).
    pub fn modality_out(&self) -> usize {
        *self.modality_hidden.last().unwrap()
    }

    pub fn shared_out(&self) -> usize {
        *self.shared_hidden.last().unwrap()
    }
}

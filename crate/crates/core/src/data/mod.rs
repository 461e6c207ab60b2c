//! Dataset model, manifest/CSV ingestion, patient-level splitting,
//! and synthetic cohort generation.

pub mod dataset;
pub mod manifest;
pub mod split;
pub mod synth;

pub use dataset::{
    Dataset, ModalitySchema, ProblemClass, Sample, TaskSpec, DEFAULT_CLUSTER_K,
};
pub use manifest::{load_dataset, write_dataset, Manifest};
pub use split::{kfold_by_patient, split_by_patient, DEFAULT_FOLDS, DEFAULT_TEST_FRACTION};
pub use synth::{synth_generate, SynthConfig, SynthTask};

//! Optimization: the Adam optimizer, the sequential multi-loss
//! training loop, and grid-search cross-validation.

pub mod adam;
pub mod cv;
pub mod trainer;

pub use adam::Adam;
pub use cv::{cross_validate, select_and_train, CvReport, GridPoint, GridScore, CV_FOLDS};
pub use trainer::{
    init_output_bias, initialize_model, train, train_step, LogEntry, LossSchedule, TermKind,
    TrainConfig, TrainedModel, BIAS_PREVALENCE_THRESHOLD, DEFAULT_BATCH_SIZES,
    DEFAULT_EPOCHS, DEFAULT_LEARNING_RATES,
};

#[cfg(test)]
mod tests;

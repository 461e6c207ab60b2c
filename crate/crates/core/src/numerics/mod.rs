//! Dense matrices, the differentiable graph, losses, and the
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod matrix;

pub use gradcheck::{finite_difference_errors, gradient_check, GradCheckReport};
pub use graph::{Graph, NodeId, ATTN_DENOM_GUARD, BCE_CLAMP};
pub use loss::{
    binary_cross_entropy, mean_absolute_error, negative_log_likelihood, reconstruction_mse,
    softmax, task_loss, TaskLoss,
};
pub use matrix::Matrix;

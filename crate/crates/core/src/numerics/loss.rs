//! Batch-averaged task losses, usable outside the graph.

use crate::error::{Error, Result};
use crate::numerics::graph::{softmax_into, BCE_CLAMP};
use crate::numerics::matrix::Matrix;

/// Numerically stable softmax of a single vector.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    for &x in v {
        if !x.is_finite() {
            return Err(Error::Domain(format!("softmax input {x} is not finite")));
        }
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    Ok(out)
}

/// One batch of predictions and targets for a single task.
#[derive(Debug, Clone)]
pub enum TaskLoss<'a> {
    /// Probabilities in [0,1] against 0/1 targets.
    Binary { probs: &'a [f64], targets: &'a [f64] },
    /// Rows of log-probabilities against class indices.
    Multiclass {
        log_probs: &'a Matrix,
        targets: &'a [usize],
    },
    /// Scalar predictions against real targets (absolute error).
    Regression { preds: &'a [f64], targets: &'a [f64] },
    /// Encoder input against decoder output (squared error).
    Cluster {
        input: &'a Matrix,
        reconstruction: &'a Matrix,
    },
}

/// Batch mean of the loss appropriate to the task's problem class.
pub fn task_loss(batch: TaskLoss<'_>) -> Result<f64> {
    match batch {
        TaskLoss::Binary { probs, targets } => binary_cross_entropy(probs, targets),
        TaskLoss::Multiclass { log_probs, targets } => negative_log_likelihood(log_probs, targets),
        TaskLoss::Regression { preds, targets } => mean_absolute_error(preds, targets),
        TaskLoss::Cluster {
            input,
            reconstruction,
        } => reconstruction_mse(input, reconstruction),
    }
}

pub fn binary_cross_entropy(probs: &[f64], targets: &[f64]) -> Result<f64> {
    check_batch("binary loss", probs.len(), targets.len())?;
    let mut total = 0.0;
    for (i, (&p, &y)) in probs.iter().zip(targets).enumerate() {
        if y != 0.0 && y != 1.0 {
            return Err(Error::Domain(format!(
                "binary loss: target {y} at row {i} is not 0/1"
            )));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!(
                "binary loss: prediction {p} at row {i} outside [0,1]"
            )));
        }
        let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
    }
    Ok(total / probs.len() as f64)
}

pub fn negative_log_likelihood(log_probs: &Matrix, targets: &[usize]) -> Result<f64> {
    check_batch("multiclass loss", log_probs.rows(), targets.len())?;
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= log_probs.cols() {
            return Err(Error::Index(format!(
                "multiclass loss: class {t} at row {i} out of {} classes",
                log_probs.cols()
            )));
        }
        total -= log_probs.get(i, t);
    }
    Ok(total / targets.len() as f64)
}

pub fn mean_absolute_error(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_batch("regression loss", preds.len(), targets.len())?;
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(&p, &y)| (p - y).abs())
        .sum();
    Ok(total / preds.len() as f64)
}

pub fn reconstruction_mse(input: &Matrix, reconstruction: &Matrix) -> Result<f64> {
    if input.shape() != reconstruction.shape() {
        return Err(Error::Dimension(format!(
            "reconstruction loss: input {}x{} against output {}x{}",
            input.rows(),
            input.cols(),
            reconstruction.rows(),
            reconstruction.cols()
        )));
    }
    if input.rows() == 0 {
        return Err(Error::Domain("reconstruction loss of an empty batch".into()));
    }
    let n = (input.rows() * input.cols()) as f64;
    let total: f64 = input
        .data()
        .iter()
        .zip(reconstruction.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(total / n)
}

fn check_batch(what: &str, preds: usize, targets: usize) -> Result<()> {
    if preds == 0 {
        return Err(Error::Domain(format!("{what} of an empty batch")));
    }
    if preds != targets {
        return Err(Error::Dimension(format!(
            "{what}: {preds} predictions against {targets} targets"
        )));
    }
    Ok(())
}

//! Adaptive moment optimizer with per-tensor state shared across all
//! loss terms of a training run.

use crate::error::{Error, Result};
use crate::model::net::Model;
use crate::numerics::Graph;
use std::collections::BTreeMap;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    state: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Domain(format!(
                "learning rate {learning_rate} must be positive and finite"
            )));
        }
        Ok(Adam {
            learning_rate,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
            state: BTreeMap::new(),
        })
    }

    /// Number of optimizer steps a tensor has received so far.
    pub fn steps_for(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.steps)
    }

    /// Applies one step to every parameter registered in `graph`,
    /// reading gradients from its last backward pass. `clip` bounds
    /// the global gradient norm across the term's parameters.
    pub fn apply(&mut self, model: &mut Model, graph: &Graph, clip: Option<f64>) -> Result<()> {
        let mut scale = 1.0;
        if let Some(max_norm) = clip {
            if !(max_norm > 0.0) {
                return Err(Error::Domain(format!(
                    "gradient clip {max_norm} must be positive"
                )));
            }
            let mut sq = 0.0;
            for (name, _) in graph.params() {
                let g = graph
                    .param_grad(name)
                    .ok_or_else(|| Error::Contract(format!("no gradient for {name}")))?;
                sq += g.data().iter().map(|v| v * v).sum::<f64>();
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        for (name, _) in graph.params() {
            let grad = graph
                .param_grad(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for {name}")))?;
            let param = model.param_mut(name)?;
            if grad.shape() != param.shape() {
                return Err(Error::Dimension(format!(
                    "gradient for {name} is {}x{}, parameter is {}x{}",
                    grad.rows(),
                    grad.cols(),
                    param.rows(),
                    param.cols()
                )));
            }
            let slot = self.state.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; grad.data().len()],
                v: vec![0.0; grad.data().len()],
                steps: 0,
            });
            slot.steps += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.steps as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.steps as i32);
            for ((p, &g0), (m, v)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
            {
                let g = g0 * scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

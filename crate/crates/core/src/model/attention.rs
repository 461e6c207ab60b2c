//! Cross-task attention, standalone forward path.
//!
//! Queries come from learned task-token embeddings and are therefore
//! identical for every batch element; keys and values are per-element
//! projections of the task-head outputs. Routing weights are the
//! row-softmax of an identity matrix (self-exploitation) plus the
//! alpha-scaled, max-normalized score matrix (cross-exploration).

use crate::error::{Error, Result};
use crate::numerics::graph::{softmax_into, ATTN_DENOM_GUARD};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Task embedding table, one row per task in the joint set.
    pub w_t: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub alpha: f64,
}

impl AttentionParams {
    pub fn n_tasks(&self) -> usize {
        self.w_t.rows()
    }

    pub fn n_feature(&self) -> usize {
        self.w_q.rows()
    }

    fn validate(&self) -> Result<()> {
        let f = self.n_feature();
        for (name, m) in [("W_Q", &self.w_q), ("W_K", &self.w_k), ("W_V", &self.w_v)] {
            if m.rows() != f || m.cols() != f {
                return Err(Error::Dimension(format!(
                    "attention {name} is {}x{}, expected {f}x{f}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if self.w_t.cols() != f {
            return Err(Error::Dimension(format!(
                "attention W_T is {}x{}, expected n_tasks x {f}",
                self.w_t.rows(),
                self.w_t.cols()
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Contract(format!(
                "attention alpha {} must be finite and >= 0",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Batch-independent query matrix (n_tasks x n_feature).
    pub queries: Matrix,
    /// Routing weights per batch element (n_tasks x n_tasks each).
    pub weights: Vec<Matrix>,
    /// Recombined task embeddings per batch element.
    pub outputs: Vec<Matrix>,
}

/// Guarded normalizer: the matrix maximum when it clears the guard,
/// otherwise the largest magnitude, otherwise the guard constant.
fn denominator(m: &Matrix) -> f64 {
    let mut max_v = f64::NEG_INFINITY;
    let mut max_abs = f64::NEG_INFINITY;
    for &v in m.data() {
        max_v = max_v.max(v);
        max_abs = max_abs.max(v.abs());
    }
    if max_v > ATTN_DENOM_GUARD {
        max_v
    } else if max_abs > ATTN_DENOM_GUARD {
        max_abs
    } else {
        ATTN_DENOM_GUARD
    }
}

/// Applies the attention block to one batch of task-head outputs,
/// given as one (n_tasks x n_feature) matrix per batch element.
pub fn cross_task_attention(
    x_s: &[Matrix],
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    params.validate()?;
    let t = params.n_tasks();
    let f = params.n_feature();
    let queries = params.w_t.matmul(&params.w_q)?;
    let mut weights = Vec::with_capacity(x_s.len());
    let mut outputs = Vec::with_capacity(x_s.len());
    for (i, x) in x_s.iter().enumerate() {
        if x.rows() != t || x.cols() != f {
            return Err(Error::Dimension(format!(
                "batch element {i} is {}x{}, expected {t}x{f}",
                x.rows(),
                x.cols()
            )));
        }
        let k = x.matmul(&params.w_k)?;
        let v = x.matmul(&params.w_v)?;
        let m = queries.matmul_transpose_b(&k)?;
        m.check_finite("attention scores")?;
        let denom = denominator(&m);
        let mut pre = Matrix::zeros(t, t);
        for r in 0..t {
            for c in 0..t {
                let mut val = params.alpha * m.get(r, c) / denom;
                if r == c {
                    val += 1.0;
                }
                pre.set(r, c, val);
            }
        }
        pre.check_finite("attention pre-weights")?;
        let mut w = Matrix::zeros(t, t);
        for r in 0..t {
            softmax_into(pre.row(r), w.row_mut(r));
        }
        let o = w.matmul(&v)?;
        o.check_finite("attention output")?;
        weights.push(w);
        outputs.push(o);
    }
    Ok(AttentionOutput {
        queries,
        weights,
        outputs,
    })
}

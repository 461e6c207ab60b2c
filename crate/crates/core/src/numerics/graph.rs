//! Reverse-mode differentiable graph over [`Matrix`] values.
//!
//! A [`Graph`] records primitive operations (affine maps, activations,
//! softmax, concatenation, the cross-task attention blocks, loss
//! reductions) as they are built. Node values are computed eagerly at
//! construction; [`Graph::forward`] re-evaluates everything from the
//! current leaf values, which is what the finite-difference checker
//! relies on after perturbing a parameter entry. [`Graph::backward`]
//! fills one gradient buffer per node; parameters not reachable from
//! the loss keep an exactly-zero gradient.
//!
//! Batched task tensors are stored task-major: a stack of `n_tasks`
//! blocks of `n_batch` rows each, so row `t * n_batch + i` holds task
//! `t`'s feature row for batch element `i`. The `attention_scores`,
//! `scale_by_block_max`, `add_identity_blocks` and `block_matmul` ops
//! all interpret their operands this way.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

/// Margin used to clamp binary predictions before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// Guard below which the attention denominator falls back to the
/// magnitude of the largest entry (or the guard itself).
pub const ATTN_DENOM_GUARD: f64 = 1e-8;

const ROW_NORM_GUARD: f64 = 1e-12;

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Param,
    Input,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    MatMulTransB { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    RowSoftmax { a: NodeId },
    RowLogSoftmax { a: NodeId },
    RowNormalize { a: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    SelectRows { src: NodeId, indices: Vec<usize> },
    AttentionScores { q: NodeId, k: NodeId, n_batch: usize },
    ScaleByBlockMax { m: NodeId, n_batch: usize, alpha: f64 },
    AddIdentityBlocks { m: NodeId, n_batch: usize },
    BlockMatMul { w: NodeId, v: NodeId, n_batch: usize },
    BceLoss { p: NodeId, targets: Vec<f64> },
    NllLoss { logp: NodeId, targets: Vec<usize> },
    MaeLoss { pred: NodeId, targets: Vec<f64> },
    MseBetween { a: NodeId, b: NodeId },
    NegMeanDiag { a: NodeId },
}

struct Node {
    op: Op,
    value: Matrix,
    grad: Matrix,
}

/// Differentiable computation graph with named parameters.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    loss: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let (r, c) = value.shape();
        self.nodes.push(Node {
            op,
            value,
            grad: Matrix::zeros(r, c),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a named learnable leaf.
    pub fn parameter(&mut self, name: &str, value: Matrix) -> Result<NodeId> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = self.push(Op::Param, value);
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    /// Registers a constant data leaf.
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    pub(crate) fn value_mut(&mut self, id: NodeId) -> &mut Matrix {
        &mut self.nodes[id.0].value
    }

    #[cfg(test)]
    pub(crate) fn grad_mut(&mut self, id: NodeId) -> &mut Matrix {
        &mut self.nodes[id.0].grad
    }

    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    pub fn param_grad(&self, name: &str) -> Option<&Matrix> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| self.grad(*id))
    }

    /// Marks the scalar loss node used by [`Graph::backward`].
    pub fn set_loss(&mut self, id: NodeId) -> Result<()> {
        if self.value(id).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "loss node must be 1x1, got {}x{}",
                self.value(id).rows(),
                self.value(id).cols()
            )));
        }
        self.loss = Some(id);
        Ok(())
    }

    pub fn loss_node(&self) -> Option<NodeId> {
        self.loss
    }

    pub fn loss_value(&self) -> Result<f64> {
        let id = self
            .loss
            .ok_or_else(|| Error::Contract("graph has no loss node".into()))?;
        Ok(self.value(id).get(0, 0))
    }

    fn add_op(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        Ok(self.push(op, value))
    }

    // -- op constructors -------------------------------------------------

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_op(Op::Affine { x, w, b })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_op(Op::MatMul { a, b })
    }

    pub fn matmul_transpose_b(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_op(Op::MatMulTransB { a, b })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.add_op(Op::Transpose { a })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_op(Op::Add { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.add_op(Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.add_op(Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.add_op(Op::Sigmoid { a })
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.add_op(Op::RowSoftmax { a })
    }

    pub fn row_log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.add_op(Op::RowLogSoftmax { a })
    }

    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.add_op(Op::RowNormalize { a })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.add_op(Op::ConcatCols {
            parts: parts.to_vec(),
        })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.add_op(Op::ConcatRows {
            parts: parts.to_vec(),
        })
    }

    pub fn select_rows(&mut self, src: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.add_op(Op::SelectRows { src, indices })
    }

    /// Per-element score blocks `M_i = Q * K_i^T` over a task-major stack.
    pub fn attention_scores(&mut self, q: NodeId, k: NodeId, n_batch: usize) -> Result<NodeId> {
        self.add_op(Op::AttentionScores { q, k, n_batch })
    }

    /// Per-element `alpha * M_i / denom_i` with the guarded max denominator.
    pub fn scale_by_block_max(&mut self, m: NodeId, n_batch: usize, alpha: f64) -> Result<NodeId> {
        self.add_op(Op::ScaleByBlockMax { m, n_batch, alpha })
    }

    pub fn add_identity_blocks(&mut self, m: NodeId, n_batch: usize) -> Result<NodeId> {
        self.add_op(Op::AddIdentityBlocks { m, n_batch })
    }

    /// Per-element product `O_i = W_i * V_i` over task-major stacks.
    pub fn block_matmul(&mut self, w: NodeId, v: NodeId, n_batch: usize) -> Result<NodeId> {
        self.add_op(Op::BlockMatMul { w, v, n_batch })
    }

    pub fn bce_loss(&mut self, p: NodeId, targets: Vec<f64>) -> Result<NodeId> {
        self.add_op(Op::BceLoss { p, targets })
    }

    pub fn nll_loss(&mut self, logp: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        self.add_op(Op::NllLoss { logp, targets })
    }

    pub fn mae_loss(&mut self, pred: NodeId, targets: Vec<f64>) -> Result<NodeId> {
        self.add_op(Op::MaeLoss { pred, targets })
    }

    pub fn mse_between(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_op(Op::MseBetween { a, b })
    }

    pub fn neg_mean_diag(&mut self, a: NodeId) -> Result<NodeId> {
        self.add_op(Op::NegMeanDiag { a })
    }

    // -- evaluation -------------------------------------------------------

    fn val(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn eval(&self, op: &Op) -> Result<Matrix> {
        match op {
            Op::Param | Op::Input => unreachable!("leaves are never re-evaluated through eval"),
            Op::Affine { x, w, b } => {
                let (x, w, b) = (self.val(*x), self.val(*w), self.val(*b));
                if x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols() {
                    return Err(Error::Dimension(format!(
                        "affine: x {}x{}, w {}x{}, b {}x{}",
                        x.rows(),
                        x.cols(),
                        w.rows(),
                        w.cols(),
                        b.rows(),
                        b.cols()
                    )));
                }
                let mut y = x.matmul(w)?;
                for r in 0..y.rows() {
                    let row = y.row_mut(r);
                    for (v, bv) in row.iter_mut().zip(b.row(0)) {
                        *v += bv;
                    }
                }
                y.check_finite("affine")?;
                Ok(y)
            }
            Op::MatMul { a, b } => self.val(*a).matmul(self.val(*b)),
            Op::MatMulTransB { a, b } => self.val(*a).matmul_transpose_b(self.val(*b)),
            Op::Transpose { a } => Ok(self.val(*a).transpose()),
            Op::Add { a, b } => self.val(*a).add(self.val(*b)),
            Op::Scale { a, c } => self.val(*a).scale(*c),
            Op::Relu { a } => {
                let a = self.val(*a);
                let data = a.data().iter().map(|&v| v.max(0.0)).collect();
                Matrix::from_vec(a.rows(), a.cols(), data)
            }
            Op::Sigmoid { a } => {
                let a = self.val(*a);
                let data = a.data().iter().map(|&v| sigmoid(v)).collect();
                Matrix::from_vec(a.rows(), a.cols(), data)
            }
            Op::RowSoftmax { a } => {
                let a = self.val(*a);
                let mut out = Matrix::zeros(a.rows(), a.cols());
                for r in 0..a.rows() {
                    softmax_into(a.row(r), out.row_mut(r));
                }
                out.check_finite("row_softmax")?;
                Ok(out)
            }
            Op::RowLogSoftmax { a } => {
                let a = self.val(*a);
                let mut out = Matrix::zeros(a.rows(), a.cols());
                for r in 0..a.rows() {
                    log_softmax_into(a.row(r), out.row_mut(r));
                }
                out.check_finite("row_log_softmax")?;
                Ok(out)
            }
            Op::RowNormalize { a } => {
                let a = self.val(*a);
                let mut out = Matrix::zeros(a.rows(), a.cols());
                for r in 0..a.rows() {
                    let norm = l2_norm(a.row(r)).max(ROW_NORM_GUARD);
                    for (o, &v) in out.row_mut(r).iter_mut().zip(a.row(r)) {
                        *o = v / norm;
                    }
                }
                out.check_finite("row_normalize")?;
                Ok(out)
            }
            Op::ConcatCols { parts } => {
                if parts.is_empty() {
                    return Err(Error::Contract("concat_cols of zero parts".into()));
                }
                let rows = self.val(parts[0]).rows();
                let cols: usize = parts.iter().map(|p| self.val(*p).cols()).sum();
                let mut out = Matrix::zeros(rows, cols);
                let mut offset = 0;
                for p in parts {
                    let m = self.val(*p);
                    if m.rows() != rows {
                        return Err(Error::Dimension(format!(
                            "concat_cols: expected {rows} rows, part has {}",
                            m.rows()
                        )));
                    }
                    for r in 0..rows {
                        out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
                    }
                    offset += m.cols();
                }
                Ok(out)
            }
            Op::ConcatRows { parts } => {
                if parts.is_empty() {
                    return Err(Error::Contract("concat_rows of zero parts".into()));
                }
                let cols = self.val(parts[0]).cols();
                let rows: usize = parts.iter().map(|p| self.val(*p).rows()).sum();
                let mut out = Matrix::zeros(rows, cols);
                let mut offset = 0;
                for p in parts {
                    let m = self.val(*p);
                    if m.cols() != cols {
                        return Err(Error::Dimension(format!(
                            "concat_rows: expected {cols} cols, part has {}",
                            m.cols()
                        )));
                    }
                    for r in 0..m.rows() {
                        out.row_mut(offset + r).copy_from_slice(m.row(r));
                    }
                    offset += m.rows();
                }
                Ok(out)
            }
            Op::SelectRows { src, indices } => {
                let src = self.val(*src);
                let mut out = Matrix::zeros(indices.len(), src.cols());
                for (r, &idx) in indices.iter().enumerate() {
                    if idx >= src.rows() {
                        return Err(Error::Index(format!(
                            "select_rows: row {idx} out of {}",
                            src.rows()
                        )));
                    }
                    out.row_mut(r).copy_from_slice(src.row(idx));
                }
                Ok(out)
            }
            Op::AttentionScores { q, k, n_batch } => {
                let (q, k) = (self.val(*q), self.val(*k));
                let n_tasks = check_stack("attention_scores", k, *n_batch)?;
                if q.rows() != n_tasks || q.cols() != k.cols() {
                    return Err(Error::Dimension(format!(
                        "attention_scores: queries {}x{} against stack of {} tasks x {} features",
                        q.rows(),
                        q.cols(),
                        n_tasks,
                        k.cols()
                    )));
                }
                let f = q.cols();
                let mut out = Matrix::zeros(n_tasks * n_batch, n_tasks);
                for i in 0..*n_batch {
                    for tq in 0..n_tasks {
                        for tk in 0..n_tasks {
                            let mut s = 0.0;
                            let krow = k.row(tk * n_batch + i);
                            let qrow = q.row(tq);
                            for fi in 0..f {
                                s += qrow[fi] * krow[fi];
                            }
                            out.set(tq * n_batch + i, tk, s);
                        }
                    }
                }
                out.check_finite("attention_scores")?;
                Ok(out)
            }
            Op::ScaleByBlockMax { m, n_batch, alpha } => {
                let m = self.val(*m);
                let n_tasks = check_stack("scale_by_block_max", m, *n_batch)?;
                if m.cols() != n_tasks {
                    return Err(Error::Dimension(format!(
                        "scale_by_block_max: stack of {} tasks but {} columns",
                        n_tasks,
                        m.cols()
                    )));
                }
                let mut out = Matrix::zeros(m.rows(), m.cols());
                for i in 0..*n_batch {
                    let (denom, _, _) = block_denominator(m, *n_batch, n_tasks, i);
                    for tq in 0..n_tasks {
                        let r = tq * n_batch + i;
                        for tk in 0..n_tasks {
                            out.set(r, tk, alpha * m.get(r, tk) / denom);
                        }
                    }
                }
                out.check_finite("scale_by_block_max")?;
                Ok(out)
            }
            Op::AddIdentityBlocks { m, n_batch } => {
                let m = self.val(*m);
                let n_tasks = check_stack("add_identity_blocks", m, *n_batch)?;
                if m.cols() != n_tasks {
                    return Err(Error::Dimension(format!(
                        "add_identity_blocks: stack of {} tasks but {} columns",
                        n_tasks,
                        m.cols()
                    )));
                }
                let mut out = m.clone();
                for i in 0..*n_batch {
                    for t in 0..n_tasks {
                        let r = t * n_batch + i;
                        out.set(r, t, out.get(r, t) + 1.0);
                    }
                }
                Ok(out)
            }
            Op::BlockMatMul { w, v, n_batch } => {
                let (w, v) = (self.val(*w), self.val(*v));
                let n_tasks = check_stack("block_matmul", w, *n_batch)?;
                if w.cols() != n_tasks || v.rows() != w.rows() {
                    return Err(Error::Dimension(format!(
                        "block_matmul: weights {}x{} against values {}x{}",
                        w.rows(),
                        w.cols(),
                        v.rows(),
                        v.cols()
                    )));
                }
                let f = v.cols();
                let mut out = Matrix::zeros(v.rows(), f);
                for i in 0..*n_batch {
                    for tq in 0..n_tasks {
                        let r = tq * n_batch + i;
                        for tk in 0..n_tasks {
                            let wv = w.get(r, tk);
                            let vrow = tk * n_batch + i;
                            for fi in 0..f {
                                let cur = out.get(r, fi);
                                out.set(r, fi, cur + wv * v.get(vrow, fi));
                            }
                        }
                    }
                }
                out.check_finite("block_matmul")?;
                Ok(out)
            }
            Op::BceLoss { p, targets } => {
                let p = self.val(*p);
                check_prediction_column("bce_loss", p, targets.len())?;
                let mut total = 0.0;
                for (i, &y) in targets.iter().enumerate() {
                    if y != 0.0 && y != 1.0 {
                        return Err(Error::Domain(format!(
                            "bce_loss: target {y} at row {i} is not 0/1"
                        )));
                    }
                    let raw = p.get(i, 0);
                    if !(0.0..=1.0).contains(&raw) {
                        return Err(Error::Domain(format!(
                            "bce_loss: prediction {raw} at row {i} outside [0,1]"
                        )));
                    }
                    let q = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    total -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
                }
                scalar(total / targets.len() as f64, "bce_loss")
            }
            Op::NllLoss { logp, targets } => {
                let logp = self.val(*logp);
                if logp.rows() != targets.len() {
                    return Err(Error::Dimension(format!(
                        "nll_loss: {} rows of log-probabilities for {} targets",
                        logp.rows(),
                        targets.len()
                    )));
                }
                let mut total = 0.0;
                for (i, &t) in targets.iter().enumerate() {
                    if t >= logp.cols() {
                        return Err(Error::Index(format!(
                            "nll_loss: class {t} at row {i} out of {} classes",
                            logp.cols()
                        )));
                    }
                    total -= logp.get(i, t);
                }
                scalar(total / targets.len() as f64, "nll_loss")
            }
            Op::MaeLoss { pred, targets } => {
                let pred = self.val(*pred);
                check_prediction_column("mae_loss", pred, targets.len())?;
                let total: f64 = targets
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| (pred.get(i, 0) - y).abs())
                    .sum();
                scalar(total / targets.len() as f64, "mae_loss")
            }
            Op::MseBetween { a, b } => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape() != b.shape() {
                    return Err(Error::Dimension(format!(
                        "mse_between: {}x{} against {}x{}",
                        a.rows(),
                        a.cols(),
                        b.rows(),
                        b.cols()
                    )));
                }
                let n = (a.rows() * a.cols()) as f64;
                let total: f64 = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                scalar(total / n, "mse_between")
            }
            Op::NegMeanDiag { a } => {
                let a = self.val(*a);
                if a.rows() != a.cols() {
                    return Err(Error::Dimension(format!(
                        "neg_mean_diag: matrix {}x{} is not square",
                        a.rows(),
                        a.cols()
                    )));
                }
                let n = a.rows() as f64;
                let total: f64 = (0..a.rows()).map(|i| a.get(i, i)).sum();
                scalar(-total / n, "neg_mean_diag")
            }
        }
    }

    /// Re-evaluates every non-leaf node from current leaf values.
    pub fn forward(&mut self) -> Result<()> {
        for idx in 0..self.nodes.len() {
            match self.nodes[idx].op {
                Op::Param | Op::Input => continue,
                _ => {
                    let op = self.nodes[idx].op.clone();
                    let value = self.eval(&op)?;
                    self.nodes[idx].value = value;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.data_mut().fill(0.0);
        }
    }

    /// Backpropagates from the loss node, filling every gradient buffer.
    pub fn backward(&mut self) -> Result<()> {
        let loss = self
            .loss
            .ok_or_else(|| Error::Contract("backward without a loss node".into()))?;
        let lv = self.value(loss).get(0, 0);
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("loss is non-finite ({lv})")));
        }
        self.zero_grads();
        self.nodes[loss.0].grad.set(0, 0, 1.0);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let g = self.nodes[idx].grad.clone();
            self.propagate(&op, idx, &g)?;
        }
        for (name, id) in &self.params {
            self.nodes[id.0]
                .grad
                .check_finite(&format!("gradient of {name}"))?;
        }
        Ok(())
    }

    fn accumulate(&mut self, target: NodeId, delta: &Matrix) {
        let grad = &mut self.nodes[target.0].grad;
        debug_assert_eq!(grad.shape(), delta.shape());
        for (g, d) in grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
    }

    fn propagate(&mut self, op: &Op, idx: usize, g: &Matrix) -> Result<()> {
        match op {
            Op::Param | Op::Input => {}
            Op::Affine { x, w, b } => {
                let dx = g.matmul_transpose_b(self.val(*w))?;
                let dw = self.val(*x).transpose_a_matmul(g)?;
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (acc, v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*w, &dw);
                self.accumulate(*b, &db);
            }
            Op::MatMul { a, b } => {
                let da = g.matmul_transpose_b(self.val(*b))?;
                let db = self.val(*a).transpose_a_matmul(g)?;
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::MatMulTransB { a, b } => {
                // y = a b^T: da = g b, db = g^T a
                let da = g.matmul(self.val(*b))?;
                let db = g.transpose_a_matmul(self.val(*a))?;
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Transpose { a } => {
                let da = g.transpose();
                self.accumulate(*a, &da);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Scale { a, c } => {
                let da = g.scale(*c)?;
                self.accumulate(*a, &da);
            }
            Op::Relu { a } => {
                let x = self.val(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                let da = Matrix::from_vec(x.rows(), x.cols(), data)?;
                self.accumulate(*a, &da);
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[idx].value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * y * (1.0 - y))
                    .collect();
                let da = Matrix::from_vec(y.rows(), y.cols(), data)?;
                self.accumulate(*a, &da);
            }
            Op::RowSoftmax { a } => {
                let y = self.nodes[idx].value.clone();
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gv, yv)| gv * yv).sum();
                    for ((d, &gv), &yv) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::RowLogSoftmax { a } => {
                let y = self.nodes[idx].value.clone();
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for ((d, &gv), &yv) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = gv - yv.exp() * gsum;
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::RowNormalize { a } => {
                let x = self.val(*a).clone();
                let y = self.nodes[idx].value.clone();
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let raw = l2_norm(x.row(r));
                    let norm = raw.max(ROW_NORM_GUARD);
                    if raw > ROW_NORM_GUARD {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gv, yv)| gv * yv).sum();
                        for ((d, &gv), &yv) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r))
                        {
                            *d = (gv - dot * yv) / norm;
                        }
                    } else {
                        // Guarded branch: denominator is the constant guard.
                        for (d, &gv) in da.row_mut(r).iter_mut().zip(g.row(r)) {
                            *d = gv / norm;
                        }
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.val(*p).shape();
                    let mut dp = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    self.accumulate(*p, &dp);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.val(*p).shape();
                    let mut dp = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        dp.row_mut(r).copy_from_slice(g.row(offset + r));
                    }
                    offset += rows;
                    self.accumulate(*p, &dp);
                }
            }
            Op::SelectRows { src, indices } => {
                let (rows, cols) = self.val(*src).shape();
                let mut dsrc = Matrix::zeros(rows, cols);
                for (r, &idx) in indices.iter().enumerate() {
                    for (d, &gv) in dsrc.row_mut(idx).iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                self.accumulate(*src, &dsrc);
            }
            Op::AttentionScores { q, k, n_batch } => {
                let qv = self.val(*q).clone();
                let kv = self.val(*k).clone();
                let n_tasks = qv.rows();
                let f = qv.cols();
                let mut dq = Matrix::zeros(n_tasks, f);
                let mut dk = Matrix::zeros(kv.rows(), f);
                for i in 0..*n_batch {
                    for tq in 0..n_tasks {
                        let r = tq * n_batch + i;
                        for tk in 0..n_tasks {
                            let gv = g.get(r, tk);
                            if gv == 0.0 {
                                continue;
                            }
                            let krow = tk * n_batch + i;
                            for fi in 0..f {
                                let cur = dq.get(tq, fi);
                                dq.set(tq, fi, cur + gv * kv.get(krow, fi));
                                let cur = dk.get(krow, fi);
                                dk.set(krow, fi, cur + gv * qv.get(tq, fi));
                            }
                        }
                    }
                }
                self.accumulate(*q, &dq);
                self.accumulate(*k, &dk);
            }
            Op::ScaleByBlockMax { m, n_batch, alpha } => {
                let mv = self.val(*m).clone();
                let n_tasks = mv.cols();
                let mut dm = Matrix::zeros(mv.rows(), mv.cols());
                for i in 0..*n_batch {
                    let (denom, arg, dsign) = block_denominator(&mv, *n_batch, n_tasks, i);
                    let mut dot = 0.0;
                    for tq in 0..n_tasks {
                        let r = tq * n_batch + i;
                        for tk in 0..n_tasks {
                            let gv = g.get(r, tk);
                            dot += gv * mv.get(r, tk);
                            let cur = dm.get(r, tk);
                            dm.set(r, tk, cur + gv * alpha / denom);
                        }
                    }
                    if let Some((ar, ac)) = arg {
                        let cur = dm.get(ar, ac);
                        dm.set(ar, ac, cur - dsign * alpha * dot / (denom * denom));
                    }
                }
                self.accumulate(*m, &dm);
            }
            Op::AddIdentityBlocks { m, .. } => {
                self.accumulate(*m, g);
            }
            Op::BlockMatMul { w, v, n_batch } => {
                let wv = self.val(*w).clone();
                let vv = self.val(*v).clone();
                let n_tasks = wv.cols();
                let f = vv.cols();
                let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                let mut dv = Matrix::zeros(vv.rows(), vv.cols());
                for i in 0..*n_batch {
                    for tq in 0..n_tasks {
                        let r = tq * n_batch + i;
                        for tk in 0..n_tasks {
                            let vrow = tk * n_batch + i;
                            let mut s = 0.0;
                            let weight = wv.get(r, tk);
                            for fi in 0..f {
                                let gv = g.get(r, fi);
                                s += gv * vv.get(vrow, fi);
                                let cur = dv.get(vrow, fi);
                                dv.set(vrow, fi, cur + weight * gv);
                            }
                            let cur = dw.get(r, tk);
                            dw.set(r, tk, cur + s);
                        }
                    }
                }
                self.accumulate(*w, &dw);
                self.accumulate(*v, &dv);
            }
            Op::BceLoss { p, targets } => {
                let pv = self.val(*p).clone();
                let gs = g.get(0, 0);
                let n = targets.len() as f64;
                let mut dp = Matrix::zeros(pv.rows(), 1);
                for (i, &y) in targets.iter().enumerate() {
                    let raw = pv.get(i, 0);
                    // Clamped predictions sit on a flat section of the loss.
                    if raw >= BCE_CLAMP && raw <= 1.0 - BCE_CLAMP {
                        dp.set(i, 0, gs * (raw - y) / (raw * (1.0 - raw) * n));
                    }
                }
                self.accumulate(*p, &dp);
            }
            Op::NllLoss { logp, targets } => {
                let (rows, cols) = self.val(*logp).shape();
                let gs = g.get(0, 0);
                let n = targets.len() as f64;
                let mut dl = Matrix::zeros(rows, cols);
                for (i, &t) in targets.iter().enumerate() {
                    dl.set(i, t, -gs / n);
                }
                self.accumulate(*logp, &dl);
            }
            Op::MaeLoss { pred, targets } => {
                let pv = self.val(*pred).clone();
                let gs = g.get(0, 0);
                let n = targets.len() as f64;
                let mut dp = Matrix::zeros(pv.rows(), 1);
                for (i, &y) in targets.iter().enumerate() {
                    let d = pv.get(i, 0) - y;
                    dp.set(i, 0, gs * sign(d) / n);
                }
                self.accumulate(*pred, &dp);
            }
            Op::MseBetween { a, b } => {
                let av = self.val(*a).clone();
                let bv = self.val(*b).clone();
                let gs = g.get(0, 0);
                let n = (av.rows() * av.cols()) as f64;
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for (d, (&x, &y)) in da.data_mut().iter_mut().zip(av.data().iter().zip(bv.data()))
                {
                    *d = gs * 2.0 * (x - y) / n;
                }
                let db = da.scale(-1.0)?;
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::NegMeanDiag { a } => {
                let (rows, cols) = self.val(*a).shape();
                let gs = g.get(0, 0);
                let mut da = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    da.set(i, i, -gs / rows as f64);
                }
                self.accumulate(*a, &da);
            }
        }
        Ok(())
    }
}

/// Guarded per-block denominator: the block maximum when it clears the
/// guard, otherwise the largest magnitude, otherwise the guard itself.
/// Returns `(denominator, entry the derivative flows through, its sign)`.
fn block_denominator(
    m: &Matrix,
    n_batch: usize,
    n_tasks: usize,
    element: usize,
) -> (f64, Option<(usize, usize)>, f64) {
    let mut max_v = f64::NEG_INFINITY;
    let mut max_pos = (0, 0);
    let mut max_abs = f64::NEG_INFINITY;
    let mut max_abs_pos = (0, 0);
    for tq in 0..n_tasks {
        let r = tq * n_batch + element;
        for tk in 0..n_tasks {
            let v = m.get(r, tk);
            if v > max_v {
                max_v = v;
                max_pos = (r, tk);
            }
            if v.abs() > max_abs {
                max_abs = v.abs();
                max_abs_pos = (r, tk);
            }
        }
    }
    if max_v > ATTN_DENOM_GUARD {
        (max_v, Some(max_pos), 1.0)
    } else if max_abs > ATTN_DENOM_GUARD {
        let v = m.get(max_abs_pos.0, max_abs_pos.1);
        (max_abs, Some(max_abs_pos), sign(v))
    } else {
        (ATTN_DENOM_GUARD, None, 0.0)
    }
}

fn check_stack(op: &str, stacked: &Matrix, n_batch: usize) -> Result<usize> {
    if n_batch == 0 || stacked.rows() % n_batch != 0 {
        return Err(Error::Dimension(format!(
            "{op}: {} rows is not a stack of batches of {n_batch}",
            stacked.rows()
        )));
    }
    Ok(stacked.rows() / n_batch)
}

fn check_prediction_column(op: &str, p: &Matrix, n: usize) -> Result<()> {
    if p.cols() != 1 || p.rows() != n {
        return Err(Error::Dimension(format!(
            "{op}: predictions {}x{} against {n} targets",
            p.rows(),
            p.cols()
        )));
    }
    Ok(())
}

fn scalar(v: f64, context: &str) -> Result<Matrix> {
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite value in {context}")));
    }
    Matrix::from_vec(1, 1, vec![v])
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

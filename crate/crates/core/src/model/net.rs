//! The multitask network: modality nets, shared trunk, contrastive
//! projections, task heads, cross-task attention, per-task outputs,
//! and the cluster autoencoder.
//!
//! Two execution paths share one parameter store: a plain matrix path
//! for inference (assembled from the public stage operations) and a
//! differentiable-graph path for training. Tests pin the two paths
//! against each other.

use crate::data::dataset::{Dataset, ModalitySchema, ProblemClass, TaskSpec};
use crate::error::{Error, Result};
use crate::model::attention::{cross_task_attention, AttentionParams};
use crate::model::config::ModelConfig;
use crate::numerics::graph::{log_softmax_into, Graph, NodeId};
use crate::numerics::Matrix;
use crate::seeding::derive_seed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap};

/// Per-task prediction batch.
#[derive(Debug, Clone)]
pub enum TaskOutput {
    /// Probabilities in (0,1).
    Binary(Vec<f64>),
    /// Log-probabilities, one row per sample.
    Multiclass(Matrix),
    /// Raw scalar predictions.
    Regression(Vec<f64>),
}

/// A loss term packaged as its own differentiable graph.
pub struct TermGraph {
    pub graph: Graph,
    pub loss: NodeId,
}

/// Every active loss term in one graph, combined as a weighted sum.
/// `terms` keeps each term's unweighted loss node for logging; labels
/// are "contrastive" or the task name.
pub struct SummedGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub terms: Vec<(String, NodeId, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    schemas: Vec<ModalitySchema>,
    tasks: Vec<TaskSpec>,
    params: BTreeMap<String, Matrix>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("finite init")
}

fn ffn_names(prefix: &str, layer: usize) -> (String, String) {
    (format!("{prefix}.l{layer}.w"), format!("{prefix}.l{layer}.b"))
}

impl Model {
    pub fn new(
        config: ModelConfig,
        schemas: Vec<ModalitySchema>,
        tasks: Vec<TaskSpec>,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = Model::param_shapes(&config, &schemas, &tasks)?;
        let mut params = BTreeMap::new();
        for (name, rows, cols) in shapes {
            let value = if name.ends_with(".b") {
                Matrix::zeros(rows, cols)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &name));
                glorot(&mut rng, rows, cols)
            };
            params.insert(name, value);
        }
        Ok(Model {
            config,
            schemas,
            tasks,
            params,
        })
    }

    /// Rebuilds a model from checkpointed parts, validating that the
    /// parameter table matches what the config implies.
    pub(crate) fn from_parts(
        config: ModelConfig,
        schemas: Vec<ModalitySchema>,
        tasks: Vec<TaskSpec>,
        params: BTreeMap<String, Matrix>,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = Model::param_shapes(&config, &schemas, &tasks)?;
        if shapes.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model needs {}",
                params.len(),
                shapes.len()
            )));
        }
        for (name, rows, cols) in &shapes {
            match params.get(name) {
                None => {
                    return Err(Error::Format(format!("checkpoint missing tensor {name}")));
                }
                Some(m) if m.shape() != (*rows, *cols) => {
                    return Err(Error::Format(format!(
                        "checkpoint tensor {name} is {}x{}, expected {rows}x{cols}",
                        m.rows(),
                        m.cols()
                    )));
                }
                Some(_) => {}
            }
        }
        Ok(Model {
            config,
            schemas,
            tasks,
            params,
        })
    }

    fn param_shapes(
        config: &ModelConfig,
        schemas: &[ModalitySchema],
        tasks: &[TaskSpec],
    ) -> Result<Vec<(String, usize, usize)>> {
        if schemas.is_empty() {
            return Err(Error::Contract("model needs at least one modality".into()));
        }
        for t in tasks {
            t.validate()?;
        }
        let mut shapes = Vec::new();
        let mut ffn = |prefix: &str, input: usize, widths: &[usize]| {
            let mut prev = input;
            for (i, &w) in widths.iter().enumerate() {
                let (wn, bn) = ffn_names(prefix, i);
                shapes.push((wn, prev, w));
                shapes.push((bn, 1, w));
                prev = w;
            }
        };
        for s in schemas {
            ffn(&format!("modality.{}", s.name), s.dim, &config.modality_hidden);
        }
        ffn(
            "shared",
            config.modality_out() * schemas.len(),
            &config.shared_hidden,
        );
        if schemas.len() >= 2 {
            for s in schemas {
                shapes.push((
                    format!("contrast.{}.w", s.name),
                    config.modality_out(),
                    config.contrastive_proj_dim,
                ));
                shapes.push((format!("contrast.{}.b", s.name), 1, config.contrastive_proj_dim));
            }
        }
        let supervised: Vec<&TaskSpec> =
            tasks.iter().filter(|t| t.class.is_supervised()).collect();
        for t in &supervised {
            shapes.push((
                format!("head.{}.w", t.name),
                config.shared_out(),
                config.n_feature,
            ));
            shapes.push((format!("head.{}.b", t.name), 1, config.n_feature));
            let out_dim = match t.class {
                ProblemClass::Multiclass => t.num_classes(),
                _ => 1,
            };
            shapes.push((format!("out.{}.w", t.name), config.n_feature, out_dim));
            shapes.push((format!("out.{}.b", t.name), 1, out_dim));
        }
        if !supervised.is_empty() {
            let f = config.n_feature;
            shapes.push(("attn.w_t".into(), supervised.len(), f));
            shapes.push(("attn.w_q".into(), f, f));
            shapes.push(("attn.w_k".into(), f, f));
            shapes.push(("attn.w_v".into(), f, f));
        }
        if tasks.iter().any(|t| t.class == ProblemClass::Cluster) {
            let d: usize = schemas.iter().map(|s| s.dim).sum();
            let h = config.autoencoder_hidden;
            let l = config.autoencoder_latent;
            for (name, rows, cols) in [
                ("ae.enc.l0", d, h),
                ("ae.enc.l1", h, l),
                ("ae.dec.l0", l, h),
                ("ae.dec.l1", h, d),
            ] {
                shapes.push((format!("{name}.w"), rows, cols));
                shapes.push((format!("{name}.b"), 1, cols));
            }
        }
        Ok(shapes)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schemas(&self) -> &[ModalitySchema] {
        &self.schemas
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn supervised_tasks(&self) -> Vec<&TaskSpec> {
        self.tasks.iter().filter(|t| t.class.is_supervised()).collect()
    }

    pub fn cluster_task(&self) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.class == ProblemClass::Cluster)
    }

    pub fn params(&self) -> &BTreeMap<String, Matrix> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn set_param(&mut self, name: &str, value: Matrix) -> Result<()> {
        let current = self.param(name)?;
        if current.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {name} is {}x{}, got {}x{}",
                current.rows(),
                current.cols(),
                value.rows(),
                value.cols()
            )));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    // -- plain forward path ------------------------------------------------

    fn p_affine(&self, x: &Matrix, w_name: &str, b_name: &str) -> Result<Matrix> {
        let w = self.param(w_name)?;
        let b = self.param(b_name)?;
        if x.cols() != w.rows() {
            return Err(Error::Dimension(format!(
                "input {}x{} into layer {w_name} of {}x{}",
                x.rows(),
                x.cols(),
                w.rows(),
                w.cols()
            )));
        }
        let mut y = x.matmul(w)?;
        for r in 0..y.rows() {
            for (v, bv) in y.row_mut(r).iter_mut().zip(b.row(0)) {
                *v += bv;
            }
        }
        Ok(y)
    }

    fn p_ffn(&self, prefix: &str, widths: &[usize], x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for i in 0..widths.len() {
            let (wn, bn) = ffn_names(prefix, i);
            h = self.p_affine(&h, &wn, &bn)?;
            for v in h.data_mut() {
                *v = v.max(0.0);
            }
        }
        Ok(h)
    }

    /// One modality net on a batch of raw embeddings.
    pub fn modality_forward(&self, modality: usize, x: &Matrix) -> Result<Matrix> {
        let schema = self
            .schemas
            .get(modality)
            .ok_or_else(|| Error::Index(format!("modality {modality} out of range")))?;
        if x.cols() != schema.dim {
            return Err(Error::Dimension(format!(
                "modality {} expects dim {}, got {}",
                schema.name,
                schema.dim,
                x.cols()
            )));
        }
        self.p_ffn(
            &format!("modality.{}", schema.name),
            &self.config.modality_hidden,
            x,
        )
    }

    /// Concatenates per-modality representations in declaration order
    /// and applies the shared net.
    pub fn fuse_and_share(&self, h_list: &[Matrix]) -> Result<Matrix> {
        if h_list.len() != self.schemas.len() {
            return Err(Error::Contract(format!(
                "{} modality representations given, model declares {}",
                h_list.len(),
                self.schemas.len()
            )));
        }
        let rows = h_list[0].rows();
        let out = self.config.modality_out();
        for (h, s) in h_list.iter().zip(&self.schemas) {
            if h.rows() != rows || h.cols() != out {
                return Err(Error::Dimension(format!(
                    "representation for {} is {}x{}, expected {rows}x{out}",
                    s.name,
                    h.rows(),
                    h.cols()
                )));
            }
        }
        let mut data = Vec::with_capacity(rows * out * h_list.len());
        for r in 0..rows {
            for h in h_list {
                data.extend_from_slice(h.row(r));
            }
        }
        let fused = Matrix::from_vec(rows, out * h_list.len(), data)?;
        self.p_ffn("shared", &self.config.shared_hidden, &fused)
    }

    /// Contrastive projection of one modality's representation.
    pub fn project_contrastive(&self, modality: usize, h: &Matrix) -> Result<Matrix> {
        let schema = self
            .schemas
            .get(modality)
            .ok_or_else(|| Error::Index(format!("modality {modality} out of range")))?;
        self.p_affine(
            h,
            &format!("contrast.{}.w", schema.name),
            &format!("contrast.{}.b", schema.name),
        )
    }

    /// Per-task head outputs in declaration order (n x n_feature each).
    pub fn task_heads_forward(&self, z: &Matrix) -> Result<Vec<Matrix>> {
        let supervised = self.supervised_tasks();
        if supervised.is_empty() {
            return Err(Error::Contract("model has no supervised tasks".into()));
        }
        let mut heads = Vec::with_capacity(supervised.len());
        for t in supervised {
            let mut h = self.p_affine(
                z,
                &format!("head.{}.w", t.name),
                &format!("head.{}.b", t.name),
            )?;
            for v in h.data_mut() {
                *v = v.max(0.0);
            }
            heads.push(h);
        }
        Ok(heads)
    }

    pub fn attention_params(&self) -> Result<AttentionParams> {
        Ok(AttentionParams {
            w_t: self.param("attn.w_t")?.clone(),
            w_q: self.param("attn.w_q")?.clone(),
            w_k: self.param("attn.w_k")?.clone(),
            w_v: self.param("attn.w_v")?.clone(),
            alpha: self.config.alpha,
        })
    }

    /// Per-task output layer on that task's attention slice.
    pub fn task_output(&self, task: usize, o_task: &Matrix) -> Result<TaskOutput> {
        let spec = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::Index(format!("task {task} out of range")))?;
        if spec.class == ProblemClass::Cluster {
            return Err(Error::Contract(format!(
                "cluster task {} does not flow through attention outputs",
                spec.name
            )));
        }
        let y = self.p_affine(
            o_task,
            &format!("out.{}.w", spec.name),
            &format!("out.{}.b", spec.name),
        )?;
        Ok(match spec.class {
            ProblemClass::Binary => {
                let p = y
                    .data()
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 {
                            1.0 / (1.0 + (-v).exp())
                        } else {
                            let e = v.exp();
                            e / (1.0 + e)
                        }
                    })
                    .collect();
                TaskOutput::Binary(p)
            }
            ProblemClass::Multiclass => {
                let mut lp = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    log_softmax_into(y.row(r), lp.row_mut(r));
                }
                TaskOutput::Multiclass(lp)
            }
            ProblemClass::Regression => TaskOutput::Regression(y.data().to_vec()),
            ProblemClass::Cluster => unreachable!(),
        })
    }

    /// Encoder + decoder on raw concatenated embeddings.
    pub fn autoencoder_forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if self.cluster_task().is_none() {
            return Err(Error::Contract(
                "model has no cluster task, autoencoder absent".into(),
            ));
        }
        let d: usize = self.schemas.iter().map(|s| s.dim).sum();
        if x.cols() != d {
            return Err(Error::Dimension(format!(
                "autoencoder expects width {d}, got {}",
                x.cols()
            )));
        }
        let mut h = self.p_affine(x, "ae.enc.l0.w", "ae.enc.l0.b")?;
        for v in h.data_mut() {
            *v = v.max(0.0);
        }
        let latent = self.p_affine(&h, "ae.enc.l1.w", "ae.enc.l1.b")?;
        let mut h = self.p_affine(&latent, "ae.dec.l0.w", "ae.dec.l0.b")?;
        for v in h.data_mut() {
            *v = v.max(0.0);
        }
        let recon = self.p_affine(&h, "ae.dec.l1.w", "ae.dec.l1.b")?;
        Ok((latent, recon))
    }

    /// Full inference path over the given sample rows: trunk, heads,
    /// attention, per-task outputs. Tasks in declaration order,
    /// cluster task excluded.
    pub fn predict(&self, ds: &Dataset, rows: &[usize]) -> Result<Vec<(String, TaskOutput)>> {
        self.check_dataset(ds)?;
        let z = self.shared_embedding(ds, rows)?;
        let heads = self.task_heads_forward(&z)?;
        let elements = per_element(&heads)?;
        let out = cross_task_attention(&elements, &self.attention_params()?)?;
        let supervised = self.supervised_tasks();
        let f = self.config.n_feature;
        let mut preds = Vec::with_capacity(supervised.len());
        for (si, spec) in supervised.iter().enumerate() {
            let mut data = Vec::with_capacity(rows.len() * f);
            for o in &out.outputs {
                data.extend_from_slice(o.row(si));
            }
            let o_task = Matrix::from_vec(rows.len(), f, data)?;
            let global = self.tasks.iter().position(|t| t.name == spec.name).unwrap();
            preds.push((spec.name.clone(), self.task_output(global, &o_task)?));
        }
        Ok(preds)
    }

    /// Shared-trunk embedding for the given rows.
    pub fn shared_embedding(&self, ds: &Dataset, rows: &[usize]) -> Result<Matrix> {
        self.check_dataset(ds)?;
        let mut h_list = Vec::with_capacity(self.schemas.len());
        for m in 0..self.schemas.len() {
            let x = ds.modality_batch(m, rows)?;
            h_list.push(self.modality_forward(m, &x)?);
        }
        self.fuse_and_share(&h_list)
    }

    /// Autoencoder latents for the given rows.
    pub fn cluster_latents(&self, ds: &Dataset, rows: &[usize]) -> Result<Matrix> {
        self.check_dataset(ds)?;
        let x = ds.concat_batch(rows)?;
        Ok(self.autoencoder_forward(&x)?.0)
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.schemas() != self.schemas.as_slice() {
            return Err(Error::Contract(
                "dataset modalities do not match the model".into(),
            ));
        }
        if ds.tasks() != self.tasks.as_slice() {
            return Err(Error::Contract(
                "dataset tasks do not match the model".into(),
            ));
        }
        Ok(())
    }

    // -- graph builders -----------------------------------------------------

    /// Contrastive alignment term. `None` when the model has fewer
    /// than two modalities or the batch has fewer than two rows.
    pub fn contrastive_term(&self, ds: &Dataset, rows: &[usize]) -> Result<Option<TermGraph>> {
        if self.schemas.len() < 2 || rows.len() < 2 {
            return Ok(None);
        }
        let mut b = GraphBuild::new(self);
        let (h_list, _) = b.trunk(ds, rows, false)?;
        let tau = self.config.contrastive_temperature;
        let mut projections = Vec::with_capacity(h_list.len());
        for (m, h) in h_list.iter().enumerate() {
            let name = &self.schemas[m].name;
            let w = b.param(&format!("contrast.{name}.w"))?;
            let bias = b.param(&format!("contrast.{name}.b"))?;
            let proj = b.g.affine(*h, w, bias)?;
            projections.push(b.g.row_normalize(proj)?);
        }
        let mut pair_losses = Vec::new();
        for a in 0..projections.len() {
            for c in a + 1..projections.len() {
                let sim = b.g.matmul_transpose_b(projections[a], projections[c])?;
                let scaled = b.g.scale(sim, 1.0 / tau)?;
                let fwd = b.g.row_log_softmax(scaled)?;
                let la = b.g.neg_mean_diag(fwd)?;
                let simt = b.g.transpose(scaled)?;
                let bwd = b.g.row_log_softmax(simt)?;
                let lb = b.g.neg_mean_diag(bwd)?;
                let sum = b.g.add(la, lb)?;
                pair_losses.push(b.g.scale(sum, 0.5)?);
            }
        }
        let mut total = pair_losses[0];
        for &l in &pair_losses[1..] {
            total = b.g.add(total, l)?;
        }
        let loss = b.g.scale(total, 1.0 / pair_losses.len() as f64)?;
        b.g.set_loss(loss)?;
        Ok(Some(TermGraph { graph: b.g, loss }))
    }

    /// Supervised loss term for one task (global index), restricted to
    /// the rows carrying that task's label. `None` when no row does.
    pub fn task_term(&self, ds: &Dataset, rows: &[usize], task: usize) -> Result<Option<TermGraph>> {
        let spec = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::Index(format!("task {task} out of range")))?;
        if !spec.class.is_supervised() {
            return Err(Error::Contract(format!(
                "task {} is not supervised",
                spec.name
            )));
        }
        let labeled: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&r| ds.label(r, task).is_some())
            .collect();
        if labeled.is_empty() {
            return Ok(None);
        }
        let mut b = GraphBuild::new(self);
        let (_, z) = b.trunk(ds, &labeled, true)?;
        let o = b.attention(z.expect("shared embedding requested"), labeled.len())?;
        let sup_idx = self
            .supervised_tasks()
            .iter()
            .position(|t| t.name == spec.name)
            .unwrap();
        let slice_rows: Vec<usize> =
            (sup_idx * labeled.len()..(sup_idx + 1) * labeled.len()).collect();
        let o_task = b.g.select_rows(o, slice_rows)?;
        let loss = b.task_loss_node(ds, &labeled, task, o_task)?;
        b.g.set_loss(loss)?;
        Ok(Some(TermGraph { graph: b.g, loss }))
    }

    /// Autoencoder reconstruction term. `None` when the model has no
    /// cluster task.
    pub fn cluster_term(&self, ds: &Dataset, rows: &[usize]) -> Result<Option<TermGraph>> {
        if self.cluster_task().is_none() {
            return Ok(None);
        }
        let mut b = GraphBuild::new(self);
        let x = b.g.input(ds.concat_batch(rows)?);
        let recon = b.autoencoder(x)?;
        let loss = b.g.mse_between(recon, x)?;
        b.g.set_loss(loss)?;
        Ok(Some(TermGraph { graph: b.g, loss }))
    }

    /// All terms in one graph, weighted sum (the ablation schedule).
    /// `task_weights` aligns with task declaration order; the cluster
    /// task's entry weights the reconstruction term. `None` when the
    /// batch activates no term at all.
    pub fn summed_graph(
        &self,
        ds: &Dataset,
        rows: &[usize],
        contrastive_weight: f64,
        task_weights: &[f64],
    ) -> Result<Option<SummedGraph>> {
        if task_weights.len() != self.tasks.len() {
            return Err(Error::Contract(format!(
                "{} task weights for {} tasks",
                task_weights.len(),
                self.tasks.len()
            )));
        }
        let mut b = GraphBuild::new(self);
        let has_supervised = !self.supervised_tasks().is_empty();
        let (h_list, z) = b.trunk(ds, rows, has_supervised)?;
        let mut terms: Vec<(String, NodeId, f64)> = Vec::new();
        if contrastive_weight > 0.0 && self.schemas.len() >= 2 && rows.len() >= 2 {
            let tau = self.config.contrastive_temperature;
            let mut projections = Vec::with_capacity(h_list.len());
            for (m, h) in h_list.iter().enumerate() {
                let name = &self.schemas[m].name;
                let w = b.param(&format!("contrast.{name}.w"))?;
                let bias = b.param(&format!("contrast.{name}.b"))?;
                let proj = b.g.affine(*h, w, bias)?;
                projections.push(b.g.row_normalize(proj)?);
            }
            let mut pair_losses = Vec::new();
            for a in 0..projections.len() {
                for c in a + 1..projections.len() {
                    let sim = b.g.matmul_transpose_b(projections[a], projections[c])?;
                    let scaled = b.g.scale(sim, 1.0 / tau)?;
                    let fwd = b.g.row_log_softmax(scaled)?;
                    let la = b.g.neg_mean_diag(fwd)?;
                    let simt = b.g.transpose(scaled)?;
                    let bwd = b.g.row_log_softmax(simt)?;
                    let lb = b.g.neg_mean_diag(bwd)?;
                    let sum = b.g.add(la, lb)?;
                    pair_losses.push(b.g.scale(sum, 0.5)?);
                }
            }
            let mut total = pair_losses[0];
            for &l in &pair_losses[1..] {
                total = b.g.add(total, l)?;
            }
            let mean = b.g.scale(total, 1.0 / pair_losses.len() as f64)?;
            terms.push(("contrastive".into(), mean, contrastive_weight));
        }
        if has_supervised {
            let o = b.attention(z.expect("shared embedding requested"), rows.len())?;
            for (sup_idx, spec) in self.supervised_tasks().iter().enumerate() {
                let task = self.tasks.iter().position(|t| t.name == spec.name).unwrap();
                if task_weights[task] == 0.0 {
                    continue;
                }
                let labeled_pos: Vec<usize> = (0..rows.len())
                    .filter(|&p| ds.label(rows[p], task).is_some())
                    .collect();
                if labeled_pos.is_empty() {
                    continue;
                }
                let labeled_rows: Vec<usize> = labeled_pos.iter().map(|&p| rows[p]).collect();
                let slice: Vec<usize> = labeled_pos
                    .iter()
                    .map(|&p| sup_idx * rows.len() + p)
                    .collect();
                let o_task = b.g.select_rows(o, slice)?;
                let loss = b.task_loss_node(ds, &labeled_rows, task, o_task)?;
                terms.push((spec.name.clone(), loss, task_weights[task]));
            }
        }
        if let Some(cluster) = self.cluster_task() {
            let task = self
                .tasks
                .iter()
                .position(|t| t.name == cluster.name)
                .unwrap();
            if task_weights[task] > 0.0 {
                let x = b.g.input(ds.concat_batch(rows)?);
                let recon = b.autoencoder(x)?;
                let loss = b.g.mse_between(recon, x)?;
                terms.push((cluster.name.clone(), loss, task_weights[task]));
            }
        }
        if terms.is_empty() {
            return Ok(None);
        }
        let mut total: Option<NodeId> = None;
        for (_, raw, weight) in &terms {
            let scaled = b.g.scale(*raw, *weight)?;
            total = Some(match total {
                None => scaled,
                Some(acc) => b.g.add(acc, scaled)?,
            });
        }
        let loss = total.expect("at least one term");
        b.g.set_loss(loss)?;
        Ok(Some(SummedGraph {
            graph: b.g,
            loss,
            terms,
        }))
    }
}

/// Re-slices per-task head outputs (n x F each) into per-batch-element
/// matrices (n_tasks x F each).
pub fn per_element(heads: &[Matrix]) -> Result<Vec<Matrix>> {
    if heads.is_empty() {
        return Err(Error::Contract("no task heads given".into()));
    }
    let n = heads[0].rows();
    let f = heads[0].cols();
    for h in heads {
        if h.rows() != n || h.cols() != f {
            return Err(Error::Dimension(format!(
                "head output {}x{} does not match {}x{}",
                h.rows(),
                h.cols(),
                n,
                f
            )));
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut data = Vec::with_capacity(heads.len() * f);
        for h in heads {
            data.extend_from_slice(h.row(i));
        }
        out.push(Matrix::from_vec(heads.len(), f, data)?);
    }
    Ok(out)
}

/// Symmetric temperature-scaled matching loss over modality pairs.
/// Rows are normalized internally; one modality yields 0 by convention.
pub fn contrastive_loss(projections: &[Matrix], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature {tau} must be > 0")));
    }
    if projections.len() < 2 {
        return Ok(0.0);
    }
    let n = projections[0].rows();
    if n < 2 {
        return Err(Error::Domain(
            "contrastive loss needs at least 2 rows (no negatives otherwise)".into(),
        ));
    }
    for p in projections {
        if p.rows() != n || p.cols() != projections[0].cols() {
            return Err(Error::Dimension(format!(
                "projection {}x{} does not match {}x{}",
                p.rows(),
                p.cols(),
                n,
                projections[0].cols()
            )));
        }
    }
    let normalized: Vec<Matrix> = projections
        .iter()
        .map(|p| {
            let mut q = p.clone();
            for r in 0..q.rows() {
                let norm = q.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for v in q.row_mut(r) {
                    *v /= norm;
                }
            }
            q
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0.0;
    for a in 0..normalized.len() {
        for c in a + 1..normalized.len() {
            let sim = normalized[a].matmul_transpose_b(&normalized[c])?;
            let mut fwd = 0.0;
            let mut bwd = 0.0;
            let mut buf = vec![0.0; n];
            for i in 0..n {
                let row: Vec<f64> = sim.row(i).iter().map(|v| v / tau).collect();
                log_softmax_into(&row, &mut buf);
                fwd -= buf[i];
            }
            let simt = sim.transpose();
            for i in 0..n {
                let row: Vec<f64> = simt.row(i).iter().map(|v| v / tau).collect();
                log_softmax_into(&row, &mut buf);
                bwd -= buf[i];
            }
            total += 0.5 * (fwd + bwd) / n as f64;
            pairs += 1.0;
        }
    }
    Ok(total / pairs)
}

/// Incremental graph construction over a model's parameter store.
struct GraphBuild<'m> {
    model: &'m Model,
    g: Graph,
    ids: HashMap<String, NodeId>,
}

impl<'m> GraphBuild<'m> {
    fn new(model: &'m Model) -> Self {
        GraphBuild {
            model,
            g: Graph::new(),
            ids: HashMap::new(),
        }
    }

    fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(id) = self.ids.get(name) {
            return Ok(*id);
        }
        let value = self.model.param(name)?.clone();
        let id = self.g.parameter(name, value)?;
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    fn ffn(&mut self, prefix: &str, widths: &[usize], x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for i in 0..widths.len() {
            let (wn, bn) = ffn_names(prefix, i);
            let w = self.param(&wn)?;
            let b = self.param(&bn)?;
            let a = self.g.affine(h, w, b)?;
            h = self.g.relu(a)?;
        }
        Ok(h)
    }

    /// Modality nets + fusion + shared net over the given rows.
    /// Returns per-modality representations and the shared embedding;
    /// skips the shared net when `need_shared` is false.
    fn trunk(
        &mut self,
        ds: &Dataset,
        rows: &[usize],
        need_shared: bool,
    ) -> Result<(Vec<NodeId>, Option<NodeId>)> {
        let model = self.model;
        let mut h_list = Vec::with_capacity(model.schemas.len());
        for (m, schema) in model.schemas.iter().enumerate() {
            let x = self.g.input(ds.modality_batch(m, rows)?);
            let h = self.ffn(
                &format!("modality.{}", schema.name),
                &model.config.modality_hidden,
                x,
            )?;
            h_list.push(h);
        }
        let z = if need_shared {
            let fused = if h_list.len() == 1 {
                h_list[0]
            } else {
                self.g.concat_cols(&h_list)?
            };
            Some(self.ffn("shared", &model.config.shared_hidden, fused)?)
        } else {
            None
        };
        Ok((h_list, z))
    }

    /// Heads + attention over the shared embedding; returns the
    /// task-major stacked attention output ((T*n) x F).
    fn attention(&mut self, z: NodeId, n_rows: usize) -> Result<NodeId> {
        let model = self.model;
        let supervised = model.supervised_tasks();
        let mut heads = Vec::with_capacity(supervised.len());
        for t in &supervised {
            let w = self.param(&format!("head.{}.w", t.name))?;
            let b = self.param(&format!("head.{}.b", t.name))?;
            let a = self.g.affine(z, w, b)?;
            heads.push(self.g.relu(a)?);
        }
        let stack = if heads.len() == 1 {
            heads[0]
        } else {
            self.g.concat_rows(&heads)?
        };
        let wt = self.param("attn.w_t")?;
        let wq = self.param("attn.w_q")?;
        let wk = self.param("attn.w_k")?;
        let wv = self.param("attn.w_v")?;
        let q = self.g.matmul(wt, wq)?;
        let k = self.g.matmul(stack, wk)?;
        let v = self.g.matmul(stack, wv)?;
        let scores = self.g.attention_scores(q, k, n_rows)?;
        let scaled = self
            .g
            .scale_by_block_max(scores, n_rows, model.config.alpha)?;
        let shifted = self.g.add_identity_blocks(scaled, n_rows)?;
        let w = self.g.row_softmax(shifted)?;
        self.g.block_matmul(w, v, n_rows)
    }

    /// Output layer + loss for one task over its labeled rows.
    fn task_loss_node(
        &mut self,
        ds: &Dataset,
        labeled_rows: &[usize],
        task: usize,
        o_task: NodeId,
    ) -> Result<NodeId> {
        let spec = &self.model.tasks[task];
        let w = self.param(&format!("out.{}.w", spec.name))?;
        let b = self.param(&format!("out.{}.b", spec.name))?;
        let y = self.g.affine(o_task, w, b)?;
        match spec.class {
            ProblemClass::Binary => {
                let p = self.g.sigmoid(y)?;
                let targets = labeled_rows
                    .iter()
                    .map(|&r| ds.label(r, task).unwrap())
                    .collect();
                self.g.bce_loss(p, targets)
            }
            ProblemClass::Multiclass => {
                let lp = self.g.row_log_softmax(y)?;
                let targets = labeled_rows
                    .iter()
                    .map(|&r| ds.label(r, task).unwrap() as usize)
                    .collect();
                self.g.nll_loss(lp, targets)
            }
            ProblemClass::Regression => {
                let targets = labeled_rows
                    .iter()
                    .map(|&r| ds.label(r, task).unwrap())
                    .collect();
                self.g.mae_loss(y, targets)
            }
            ProblemClass::Cluster => Err(Error::Contract(format!(
                "cluster task {} has no supervised loss",
                spec.name
            ))),
        }
    }

    /// Encoder + decoder; returns the reconstruction node.
    fn autoencoder(&mut self, x: NodeId) -> Result<NodeId> {
        let w = self.param("ae.enc.l0.w")?;
        let b = self.param("ae.enc.l0.b")?;
        let a = self.g.affine(x, w, b)?;
        let h = self.g.relu(a)?;
        let w = self.param("ae.enc.l1.w")?;
        let b = self.param("ae.enc.l1.b")?;
        let latent = self.g.affine(h, w, b)?;
        let w = self.param("ae.dec.l0.w")?;
        let b = self.param("ae.dec.l0.b")?;
        let a = self.g.affine(latent, w, b)?;
        let h = self.g.relu(a)?;
        let w = self.param("ae.dec.l1.w")?;
        let b = self.param("ae.dec.l1.b")?;
        self.g.affine(h, w, b)
    }
}

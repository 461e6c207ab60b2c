//! The training loop: per-batch sequential optimization of each loss
//! term (contrastive, supervised tasks in declaration order, cluster
//! reconstruction), imbalance-aware output-bias initialization, and
//! the per-term training log.

use crate::data::dataset::{Dataset, ProblemClass};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::net::Model;
use crate::seeding::derive_seed;
use crate::training::adam::Adam;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Binary tasks rarer than this get a prevalence-matching output bias.
pub const BIAS_PREVALENCE_THRESHOLD: f64 = 0.10;

pub const DEFAULT_EPOCHS: usize = 15;
pub const DEFAULT_BATCH_SIZES: [usize; 2] = [256, 512];
pub const DEFAULT_LEARNING_RATES: [f64; 2] = [0.0005, 0.001];

/// How the per-batch loss terms drive optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSchedule {
    /// One backward pass and one optimizer step per term, in order.
    #[default]
    Sequential,
    /// All terms combined into one weighted sum, one step per batch.
    Summed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Hyperparameter grid searched by cross-validation. Plain
    /// training uses the first entry.
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub schedule: LossSchedule,
    pub contrastive_weight: f64,
    /// Per-task loss weights by task name; absent names default to 1.
    /// A zero weight removes the term from training entirely.
    pub task_weights: BTreeMap<String, f64>,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: DEFAULT_EPOCHS,
            batch_sizes: DEFAULT_BATCH_SIZES.to_vec(),
            learning_rates: DEFAULT_LEARNING_RATES.to_vec(),
            schedule: LossSchedule::Sequential,
            contrastive_weight: 1.0,
            task_weights: BTreeMap::new(),
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Domain("epochs must be >= 1".into()));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.iter().any(|&b| b == 0) {
            return Err(Error::Domain("batch sizes must be non-empty and >= 1".into()));
        }
        if self.learning_rates.is_empty()
            || self.learning_rates.iter().any(|&l| !(l > 0.0 && l.is_finite()))
        {
            return Err(Error::Domain(
                "learning rates must be non-empty, positive, finite".into(),
            ));
        }
        if !(self.contrastive_weight >= 0.0 && self.contrastive_weight.is_finite()) {
            return Err(Error::Domain(format!(
                "contrastive weight {} must be >= 0",
                self.contrastive_weight
            )));
        }
        for (name, &w) in &self.task_weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Domain(format!(
                    "weight {w} for task {name} must be >= 0"
                )));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Domain(format!(
                    "gradient clip {c} must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn task_weight(&self, name: &str) -> f64 {
        self.task_weights.get(name).copied().unwrap_or(1.0)
    }
}

/// One loss term of a training run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TermKind {
    Contrastive,
    /// Supervised task by global task index and name.
    Task(String),
    /// Cluster reconstruction, named after the cluster task.
    Cluster(String),
}

impl TermKind {
    pub fn column(&self) -> &'static str {
        match self {
            TermKind::Contrastive => "contrastive",
            TermKind::Task(_) => "task",
            TermKind::Cluster(_) => "cluster",
        }
    }

    pub fn task_name(&self) -> Option<&str> {
        match self {
            TermKind::Contrastive => None,
            TermKind::Task(n) | TermKind::Cluster(n) => Some(n),
        }
    }
}

#[derive(Debug, Clone)]
struct Term {
    kind: TermKind,
    task_idx: Option<usize>,
    weight: f64,
}

/// One logged loss value; `value` is None when the batch had nothing
/// for the term (no labels, or too few rows for a contrastive pair).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub batch: usize,
    pub term: TermKind,
    pub value: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub log: Vec<LogEntry>,
}

impl TrainedModel {
    /// CSV export: `epoch,batch,term,task,value`; absent values stay
    /// empty.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,batch,term,task,value\n");
        for e in &self.log {
            let value = e.value.map(|v| format!("{v}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                e.batch,
                e.term.column(),
                e.term.task_name().unwrap_or(""),
                value
            ));
        }
        out
    }
}

/// ln(n_positive/n_negative), the de-biasing output offset for rare
/// binary tasks.
pub fn init_output_bias(n_positive: usize, n_negative: usize) -> Result<f64> {
    if n_positive == 0 || n_negative == 0 {
        return Err(Error::Domain(format!(
            "degenerate binary task: {n_positive} positives, {n_negative} negatives"
        )));
    }
    Ok((n_positive as f64 / n_negative as f64).ln())
}

/// The active loss terms implied by a config and dataset, in the
/// fixed training order. Zero-weight terms are absent entirely.
fn loss_terms(config: &TrainConfig, ds: &Dataset) -> Result<Vec<Term>> {
    let mut terms = Vec::new();
    if ds.schemas().len() >= 2 && config.contrastive_weight > 0.0 {
        terms.push(Term {
            kind: TermKind::Contrastive,
            task_idx: None,
            weight: config.contrastive_weight,
        });
    }
    for (i, t) in ds.tasks().iter().enumerate() {
        if !t.class.is_supervised() {
            continue;
        }
        let w = config.task_weight(&t.name);
        if w > 0.0 {
            terms.push(Term {
                kind: TermKind::Task(t.name.clone()),
                task_idx: Some(i),
                weight: w,
            });
        }
    }
    if let Some((i, t)) = ds
        .tasks()
        .iter()
        .enumerate()
        .find(|(_, t)| t.class == ProblemClass::Cluster)
    {
        let w = config.task_weight(&t.name);
        if w > 0.0 {
            terms.push(Term {
                kind: TermKind::Cluster(t.name.clone()),
                task_idx: Some(i),
                weight: w,
            });
        }
    }
    if terms.is_empty() {
        return Err(Error::Contract(
            "no active loss terms (all weights zero?)".into(),
        ));
    }
    Ok(terms)
}

fn check_finite_loss(kind: &TermKind, value: f64) -> Result<f64> {
    if !value.is_finite() {
        let name = kind.task_name().unwrap_or("contrastive");
        return Err(Error::Numeric(format!(
            "{} loss for {name} became non-finite ({value})",
            kind.column()
        )));
    }
    Ok(value)
}

/// Runs one batch through every active term: per-term backward and
/// optimizer step under the sequential schedule, or one step on the
/// weighted sum. Returns each term's unweighted loss, None where the
/// batch had nothing for it.
pub fn train_step(
    model: &mut Model,
    ds: &Dataset,
    rows: &[usize],
    config: &TrainConfig,
    adam: &mut Adam,
) -> Result<Vec<(TermKind, Option<f64>)>> {
    let terms = loss_terms(config, ds)?;
    let mut values = Vec::with_capacity(terms.len());
    match config.schedule {
        LossSchedule::Sequential => {
            for term in &terms {
                let built = match &term.kind {
                    TermKind::Contrastive => model.contrastive_term(ds, rows)?,
                    TermKind::Task(_) => {
                        model.task_term(ds, rows, term.task_idx.unwrap())?
                    }
                    TermKind::Cluster(_) => model.cluster_term(ds, rows)?,
                };
                let Some(mut tg) = built else {
                    values.push((term.kind.clone(), None));
                    continue;
                };
                let raw = check_finite_loss(&term.kind, tg.graph.loss_value()?)?;
                if term.weight != 1.0 {
                    let scaled = tg.graph.scale(tg.loss, term.weight)?;
                    tg.graph.set_loss(scaled)?;
                }
                tg.graph.backward()?;
                adam.apply(model, &tg.graph, config.grad_clip)?;
                values.push((term.kind.clone(), Some(raw)));
            }
        }
        LossSchedule::Summed => {
            let task_weights: Vec<f64> = ds
                .tasks()
                .iter()
                .map(|t| config.task_weight(&t.name))
                .collect();
            let summed =
                model.summed_graph(ds, rows, config.contrastive_weight, &task_weights)?;
            match summed {
                None => {
                    for term in &terms {
                        values.push((term.kind.clone(), None));
                    }
                }
                Some(mut sg) => {
                    check_finite_loss(&TermKind::Contrastive, sg.graph.loss_value()?)?;
                    sg.graph.backward()?;
                    adam.apply(model, &sg.graph, config.grad_clip)?;
                    for term in &terms {
                        let label = term.kind.task_name().unwrap_or("contrastive");
                        let raw = sg
                            .terms
                            .iter()
                            .find(|(l, _, _)| l == label)
                            .map(|(_, node, _)| sg.graph.value(*node).get(0, 0));
                        let raw = match raw {
                            Some(v) => Some(check_finite_loss(&term.kind, v)?),
                            None => None,
                        };
                        values.push((term.kind.clone(), raw));
                    }
                }
            }
        }
    }
    Ok(values)
}

/// Fresh model for a training run: seeded initialization plus the
/// rare-positive output-bias rule for binary tasks below the
/// prevalence threshold.
pub fn initialize_model(config: &TrainConfig, ds: &Dataset, seed: u64) -> Result<Model> {
    if ds.tasks().is_empty() {
        return Err(Error::Domain("no tasks to train".into()));
    }
    let model_config = ModelConfig {
        seed: derive_seed(seed, "model.init"),
        ..config.model.clone()
    };
    let mut model = Model::new(model_config, ds.schemas().to_vec(), ds.tasks().to_vec())?;
    for (i, t) in ds.tasks().iter().enumerate() {
        if t.class != ProblemClass::Binary {
            continue;
        }
        let (pos, neg) = ds.binary_counts(i)?;
        // Single-class data cannot be de-biased (and cannot be scored);
        // leave the bias at zero rather than fail the whole run.
        if pos == 0 || neg == 0 {
            continue;
        }
        let prevalence = pos as f64 / (pos + neg) as f64;
        if prevalence < BIAS_PREVALENCE_THRESHOLD {
            let bias = init_output_bias(pos, neg)?;
            let name = format!("out.{}.b", t.name);
            let mut b = model.param(&name)?.clone();
            b.data_mut()[0] = bias;
            model.set_param(&name, b)?;
        }
    }
    Ok(model)
}

/// Full training run at one grid point. Deterministic in
/// (config, dataset, batch_size, learning_rate, seed).
pub fn train(
    config: &TrainConfig,
    ds: &Dataset,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<TrainedModel> {
    config.validate()?;
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be >= 1".into()));
    }
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::Domain(format!(
            "learning rate {learning_rate} must be positive and finite"
        )));
    }
    let n = ds.n_samples();
    if n == 0 {
        return Err(Error::Domain("empty training set".into()));
    }
    let mut model = initialize_model(config, ds, seed)?;
    let terms = loss_terms(config, ds)?;
    let mut adam = Adam::new(learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle"));
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (batch_idx, batch) in order.chunks(batch_size).enumerate() {
            let values = train_step(&mut model, ds, batch, config, &mut adam)?;
            debug_assert_eq!(values.len(), terms.len());
            for (kind, value) in values {
                log.push(LogEntry {
                    epoch,
                    batch: batch_idx,
                    term: kind,
                    value,
                });
            }
        }
    }
    Ok(TrainedModel {
        model,
        batch_size,
        learning_rate,
        epochs: config.epochs,
        seed,
        log,
    })
}

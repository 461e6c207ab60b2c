//! Dataset model: modality schemas, task specs, samples, and the
//! validated container the rest of the pipeline consumes.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use serde::{Deserialize, Serialize};

pub const DEFAULT_CLUSTER_K: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemClass {
    Binary,
    Multiclass,
    Regression,
    Cluster,
}

impl ProblemClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProblemClass::Binary => "binary",
            ProblemClass::Multiclass => "multiclass",
            ProblemClass::Regression => "regression",
            ProblemClass::Cluster => "cluster",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(ProblemClass::Binary),
            "multiclass" => Ok(ProblemClass::Multiclass),
            "regression" => Ok(ProblemClass::Regression),
            "cluster" => Ok(ProblemClass::Cluster),
            other => Err(Error::Format(format!("unknown problem class {other:?}"))),
        }
    }

    pub fn is_supervised(&self) -> bool {
        !matches!(self, ProblemClass::Cluster)
    }
}

impl std::fmt::Display for ProblemClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySchema {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub class: ProblemClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_k: Option<usize>,
}

impl TaskSpec {
    pub fn binary(name: &str) -> Self {
        TaskSpec {
            name: name.into(),
            class: ProblemClass::Binary,
            num_classes: None,
            cluster_k: None,
        }
    }

    pub fn multiclass(name: &str, num_classes: usize) -> Self {
        TaskSpec {
            name: name.into(),
            class: ProblemClass::Multiclass,
            num_classes: Some(num_classes),
            cluster_k: None,
        }
    }

    pub fn regression(name: &str) -> Self {
        TaskSpec {
            name: name.into(),
            class: ProblemClass::Regression,
            num_classes: None,
            cluster_k: None,
        }
    }

    pub fn cluster(name: &str, k: usize) -> Self {
        TaskSpec {
            name: name.into(),
            class: ProblemClass::Cluster,
            num_classes: None,
            cluster_k: Some(k),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes.unwrap_or(0)
    }

    pub fn cluster_k(&self) -> usize {
        self.cluster_k.unwrap_or(DEFAULT_CLUSTER_K)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Contract("task with an empty name".into()));
        }
        match self.class {
            ProblemClass::Multiclass => {
                if self.num_classes() < 3 {
                    return Err(Error::Contract(format!(
                        "multiclass task {} needs num_classes >= 3",
                        self.name
                    )));
                }
            }
            ProblemClass::Cluster => {
                if self.cluster_k() < 2 {
                    return Err(Error::Contract(format!(
                        "cluster task {} needs cluster_k >= 2",
                        self.name
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// One sample: embeddings aligned with the schema order, labels
/// aligned with the task order (`None` = missing / cluster).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub patient_id: String,
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    schemas: Vec<ModalitySchema>,
    tasks: Vec<TaskSpec>,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(
        schemas: Vec<ModalitySchema>,
        tasks: Vec<TaskSpec>,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        if schemas.is_empty() {
            return Err(Error::Contract("dataset declares no modalities".into()));
        }
        for s in &schemas {
            if s.dim == 0 {
                return Err(Error::Contract(format!("modality {} has dim 0", s.name)));
            }
        }
        check_unique("modality", schemas.iter().map(|s| s.name.as_str()))?;
        check_unique("task", tasks.iter().map(|t| t.name.as_str()))?;
        for t in &tasks {
            t.validate()?;
        }
        if tasks
            .iter()
            .filter(|t| t.class == ProblemClass::Cluster)
            .count()
            > 1
        {
            return Err(Error::Contract(
                "at most one cluster task per experiment".into(),
            ));
        }
        let has_supervised = tasks.iter().any(|t| t.class.is_supervised());
        check_unique("sample", samples.iter().map(|s| s.sample_id.as_str()))?;
        for sample in &samples {
            if sample.embeddings.len() != schemas.len() {
                return Err(Error::Contract(format!(
                    "sample {} has {} modalities, dataset declares {}",
                    sample.sample_id,
                    sample.embeddings.len(),
                    schemas.len()
                )));
            }
            for (emb, schema) in sample.embeddings.iter().zip(&schemas) {
                if emb.len() != schema.dim {
                    return Err(Error::Dimension(format!(
                        "sample {} modality {} has {} values, schema says {}",
                        sample.sample_id,
                        schema.name,
                        emb.len(),
                        schema.dim
                    )));
                }
                if emb.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "sample {} modality {} contains a non-finite value",
                        sample.sample_id, schema.name
                    )));
                }
            }
            if sample.labels.len() != tasks.len() {
                return Err(Error::Contract(format!(
                    "sample {} has {} labels, dataset declares {} tasks",
                    sample.sample_id,
                    sample.labels.len(),
                    tasks.len()
                )));
            }
            let mut any_supervised_label = false;
            for (label, task) in sample.labels.iter().zip(&tasks) {
                match (task.class, label) {
                    (ProblemClass::Cluster, Some(_)) => {
                        return Err(Error::Contract(format!(
                            "sample {} carries a label for cluster task {}",
                            sample.sample_id, task.name
                        )));
                    }
                    (ProblemClass::Binary, Some(v)) => {
                        if *v != 0.0 && *v != 1.0 {
                            return Err(Error::Domain(format!(
                                "sample {} task {}: binary label {v} is not 0/1",
                                sample.sample_id, task.name
                            )));
                        }
                        any_supervised_label = true;
                    }
                    (ProblemClass::Multiclass, Some(v)) => {
                        let k = task.num_classes() as f64;
                        if v.fract() != 0.0 || *v < 0.0 || *v >= k {
                            return Err(Error::Domain(format!(
                                "sample {} task {}: class label {v} outside 0..{}",
                                sample.sample_id,
                                task.name,
                                task.num_classes()
                            )));
                        }
                        any_supervised_label = true;
                    }
                    (ProblemClass::Regression, Some(v)) => {
                        if !v.is_finite() {
                            return Err(Error::Numeric(format!(
                                "sample {} task {}: non-finite label",
                                sample.sample_id, task.name
                            )));
                        }
                        any_supervised_label = true;
                    }
                    (_, None) => {}
                }
            }
            if has_supervised && !any_supervised_label {
                return Err(Error::Contract(format!(
                    "sample {} carries no supervised label",
                    sample.sample_id
                )));
            }
        }
        Ok(Dataset {
            schemas,
            tasks,
            samples,
        })
    }

    pub fn schemas(&self) -> &[ModalitySchema] {
        &self.schemas
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// Sum of raw modality dims (autoencoder input width).
    pub fn concat_dim(&self) -> usize {
        self.schemas.iter().map(|s| s.dim).sum()
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Contract(format!("unknown task {name}")))
    }

    /// Patient ids in first-appearance order.
    pub fn patient_order(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for s in &self.samples {
            if seen.insert(s.patient_id.as_str()) {
                out.push(s.patient_id.clone());
            }
        }
        out
    }

    pub fn n_patients(&self) -> usize {
        self.patient_order().len()
    }

    /// New dataset with the given sample rows, order preserved.
    pub fn subset_samples(&self, rows: &[usize]) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(rows.len());
        for &r in rows {
            let s = self
                .samples
                .get(r)
                .ok_or_else(|| Error::Index(format!("sample row {r} out of {}", self.n_samples())))?;
            samples.push(s.clone());
        }
        Dataset::new(self.schemas.clone(), self.tasks.clone(), samples)
    }

    /// New dataset restricted to the named tasks, keeping the original
    /// declaration order regardless of the order given here.
    pub fn subset_tasks(&self, names: &[String]) -> Result<Dataset> {
        for n in names {
            self.task_index(n)?;
        }
        let keep: Vec<usize> = (0..self.tasks.len())
            .filter(|i| names.iter().any(|n| *n == self.tasks[*i].name))
            .collect();
        if keep.is_empty() {
            return Err(Error::Contract("task subset selects no tasks".into()));
        }
        let tasks: Vec<TaskSpec> = keep.iter().map(|&i| self.tasks[i].clone()).collect();
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                sample_id: s.sample_id.clone(),
                patient_id: s.patient_id.clone(),
                embeddings: s.embeddings.clone(),
                labels: keep.iter().map(|&i| s.labels[i]).collect(),
            })
            .collect();
        Dataset::new(self.schemas.clone(), tasks, samples)
    }

    pub fn label(&self, sample: usize, task: usize) -> Option<f64> {
        self.samples[sample].labels[task]
    }

    /// Rows (into `rows` positions) carrying a label for `task`.
    pub fn labeled_positions(&self, rows: &[usize], task: usize) -> Vec<usize> {
        rows.iter()
            .enumerate()
            .filter(|(_, &r)| self.samples[r].labels[task].is_some())
            .map(|(pos, _)| pos)
            .collect()
    }

    /// Positive/negative counts for a binary task over all samples.
    pub fn binary_counts(&self, task: usize) -> Result<(usize, usize)> {
        if self.tasks[task].class != ProblemClass::Binary {
            return Err(Error::Contract(format!(
                "task {} is not binary",
                self.tasks[task].name
            )));
        }
        let mut pos = 0;
        let mut neg = 0;
        for s in &self.samples {
            match s.labels[task] {
                Some(v) if v == 1.0 => pos += 1,
                Some(_) => neg += 1,
                None => {}
            }
        }
        Ok((pos, neg))
    }

    /// Batch matrix for one modality over the given sample rows.
    pub fn modality_batch(&self, modality: usize, rows: &[usize]) -> Result<Matrix> {
        let schema = self
            .schemas
            .get(modality)
            .ok_or_else(|| Error::Index(format!("modality {modality} out of range")))?;
        let mut data = Vec::with_capacity(rows.len() * schema.dim);
        for &r in rows {
            data.extend_from_slice(&self.samples[r].embeddings[modality]);
        }
        Matrix::from_vec(rows.len(), schema.dim, data)
    }

    /// Concatenated raw embeddings over the given rows (cluster input).
    pub fn concat_batch(&self, rows: &[usize]) -> Result<Matrix> {
        let d = self.concat_dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            for emb in &self.samples[r].embeddings {
                data.extend_from_slice(emb);
            }
        }
        Matrix::from_vec(rows.len(), d, data)
    }
}

fn check_unique<'a>(what: &str, names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Contract(format!("duplicate {what} name {n}")));
        }
    }
    Ok(())
}

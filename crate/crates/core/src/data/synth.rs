//! Synthetic cohort generator: patient latents, noisy linear modality
//! views, and labels driven by per-task directions whose overlap is
//! controlled by a single correlation knob.

use crate::data::dataset::{Dataset, ModalitySchema, ProblemClass, Sample, TaskSpec};
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Sample-level score jitter: breaks ties between samples of one
/// patient and keeps regression targets from being exactly linear.
const SCORE_JITTER: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthTask {
    pub name: String,
    pub class: ProblemClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_k: Option<usize>,
    /// Binary tasks only; fraction of positive samples. Default 0.5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prevalence: Option<f64>,
}

impl SynthTask {
    pub fn binary(name: &str, prevalence: f64) -> Self {
        SynthTask {
            name: name.into(),
            class: ProblemClass::Binary,
            num_classes: None,
            cluster_k: None,
            prevalence: Some(prevalence),
        }
    }

    pub fn spec(&self) -> TaskSpec {
        TaskSpec {
            name: self.name.clone(),
            class: self.class,
            num_classes: self.num_classes,
            cluster_k: self.cluster_k,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub samples_per_patient: usize,
    pub modalities: Vec<ModalitySchema>,
    pub tasks: Vec<SynthTask>,
    pub latent_dim: usize,
    /// rho in [0,1]: 1 = all tasks share one direction, 0 = independent.
    pub task_correlation: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.samples_per_patient == 0 {
            return Err(Error::Domain("need at least one patient and sample".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Domain("latent_dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.task_correlation) {
            return Err(Error::Domain(format!(
                "task_correlation {} outside [0, 1]",
                self.task_correlation
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Domain(format!(
                "noise_scale {} must be finite and >= 0",
                self.noise_scale
            )));
        }
        for t in &self.tasks {
            t.spec().validate()?;
            if let Some(p) = t.prevalence {
                if t.class != ProblemClass::Binary {
                    return Err(Error::Domain(format!(
                        "task {}: prevalence only applies to binary tasks",
                        t.name
                    )));
                }
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::Domain(format!(
                        "task {}: prevalence {p} outside (0, 1)",
                        t.name
                    )));
                }
            }
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v {
        *x /= norm;
    }
}

/// Fully seed-determined synthetic dataset per the config.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rho = cfg.task_correlation;
    let d = cfg.latent_dim;
    let n = cfg.n_patients * cfg.samples_per_patient;

    // Modality view matrices (latent_dim x dim), variance-preserving.
    let views: Vec<Vec<f64>> = cfg
        .modalities
        .iter()
        .map(|m| {
            let scale = 1.0 / (d as f64).sqrt();
            (0..d * m.dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect()
        })
        .collect();

    let mut shared = normal_vec(&mut rng, d);
    normalize(&mut shared);
    let directions: Vec<Vec<f64>> = cfg
        .tasks
        .iter()
        .map(|_| {
            let mut own = normal_vec(&mut rng, d);
            normalize(&mut own);
            let mut w: Vec<f64> = shared
                .iter()
                .zip(&own)
                .map(|(g, o)| rho * g + (1.0 - rho) * o)
                .collect();
            normalize(&mut w);
            w
        })
        .collect();

    let mut embeddings: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    let mut scores: Vec<Vec<f64>> = vec![Vec::with_capacity(n); cfg.tasks.len()];
    let mut patient_ids = Vec::with_capacity(n);
    for p in 0..cfg.n_patients {
        let u = normal_vec(&mut rng, d);
        for _ in 0..cfg.samples_per_patient {
            let mut per_modality = Vec::with_capacity(cfg.modalities.len());
            for (m, view) in cfg.modalities.iter().zip(&views) {
                let mut emb = Vec::with_capacity(m.dim);
                for j in 0..m.dim {
                    let mut v = 0.0;
                    for (i, ui) in u.iter().enumerate() {
                        v += ui * view[i * m.dim + j];
                    }
                    emb.push(v + cfg.noise_scale * rng.sample::<f64, _>(StandardNormal));
                }
                per_modality.push(emb);
            }
            embeddings.push(per_modality);
            for (t, w) in directions.iter().enumerate() {
                let s: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
                scores[t].push(s + SCORE_JITTER * rng.sample::<f64, _>(StandardNormal));
            }
            patient_ids.push(format!("p{p:05}"));
        }
    }

    // Labels from per-task score ranks: binary = top round(prev*n),
    // multiclass = equal-count bins, regression = the raw score.
    let mut labels: Vec<Vec<Option<f64>>> = vec![vec![None; cfg.tasks.len()]; n];
    for (t, task) in cfg.tasks.iter().enumerate() {
        match task.class {
            ProblemClass::Cluster => {}
            ProblemClass::Regression => {
                for (i, &s) in scores[t].iter().enumerate() {
                    labels[i][t] = Some(s);
                }
            }
            ProblemClass::Binary => {
                let prevalence = task.prevalence.unwrap_or(0.5);
                let k = (prevalence * n as f64).round() as usize;
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| {
                    scores[t][b]
                        .partial_cmp(&scores[t][a])
                        .unwrap()
                        .then(a.cmp(&b))
                });
                for (rank, &i) in order.iter().enumerate() {
                    labels[i][t] = Some(if rank < k { 1.0 } else { 0.0 });
                }
            }
            ProblemClass::Multiclass => {
                let classes = task.num_classes.unwrap_or(0);
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| {
                    scores[t][a]
                        .partial_cmp(&scores[t][b])
                        .unwrap()
                        .then(a.cmp(&b))
                });
                for (rank, &i) in order.iter().enumerate() {
                    let c = (rank * classes / n).min(classes - 1);
                    labels[i][t] = Some(c as f64);
                }
            }
        }
    }

    let samples = (0..n)
        .map(|i| Sample {
            sample_id: format!("s{i:06}"),
            patient_id: patient_ids[i].clone(),
            embeddings: embeddings[i].clone(),
            labels: labels[i].clone(),
        })
        .collect();
    let specs = cfg.tasks.iter().map(|t| t.spec()).collect();
    Dataset::new(cfg.modalities.clone(), specs, samples)
}

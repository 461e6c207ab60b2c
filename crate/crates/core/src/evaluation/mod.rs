//! Task metrics (AUROC, averaged AUROC, R², silhouette) and the
//! cross-metric normalization that makes them averageable for model
//! selection.

use crate::data::dataset::{Dataset, ProblemClass};
use crate::error::{Error, Result};
use crate::model::kmeans::{kmeans, DEFAULT_RESTARTS};
use crate::model::net::{Model, TaskOutput};
use crate::numerics::Matrix;
use serde::{Deserialize, Serialize};


#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Auroc,
    AveragedAuroc,
    RSquared,
    Silhouette,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Auroc => "auroc",
            MetricKind::AveragedAuroc => "avg_auroc",
            MetricKind::RSquared => "r2",
            MetricKind::Silhouette => "silhouette",
        }
    }

    pub fn for_class(class: ProblemClass) -> MetricKind {
        match class {
            ProblemClass::Binary => MetricKind::Auroc,
            ProblemClass::Multiclass => MetricKind::AveragedAuroc,
            ProblemClass::Regression => MetricKind::RSquared,
            ProblemClass::Cluster => MetricKind::Silhouette,
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One task's score on one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub task: String,
    pub metric: MetricKind,
    pub raw: f64,
    pub normalized: f64,
    pub n_evaluated: usize,
}

/// Midrank ranks (1-based, ties averaged) of the given values.
fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outranks a random negative,
/// ties counted half (midrank formulation).
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    for &s in scores {
        if !s.is_finite() {
            return Err(Error::Domain(format!("non-finite score {s}")));
        }
    }
    let mut n_pos = 0usize;
    for &l in labels {
        if l == 1.0 {
            n_pos += 1;
        } else if l != 0.0 {
            return Err(Error::Domain(format!("label {l} is not 0 or 1")));
        }
    }
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Domain(
            "auroc needs at least one positive and one negative".into(),
        ));
    }
    let ranks = midranks(scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1.0)
        .map(|(&r, _)| r)
        .sum();
    let p = n_pos as f64;
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

/// One-vs-rest AUROC averaged over the classes present in `labels`;
/// absent classes are skipped.
pub fn averaged_auroc(log_probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if log_probs.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} prediction rows but {} labels",
            log_probs.rows(),
            labels.len()
        )));
    }
    let k = log_probs.cols();
    for &l in labels {
        if l >= k {
            return Err(Error::Index(format!("label {l} outside {k} classes")));
        }
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Domain(
            "averaged auroc needs at least 2 classes present".into(),
        ));
    }
    let mut total = 0.0;
    for &c in &present {
        let scores: Vec<f64> = (0..labels.len()).map(|i| log_probs.get(i, c)).collect();
        let binary: Vec<f64> = labels
            .iter()
            .map(|&l| if l == c { 1.0 } else { 0.0 })
            .collect();
        total += auroc(&scores, &binary)?;
    }
    Ok(total / present.len() as f64)
}

/// 1 − SS_res/SS_tot with SS_tot about the target mean. Unclamped.
pub fn r_squared(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Dimension(format!(
            "{} predictions but {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Domain("r-squared needs at least 2 points".into()));
    }
    let n = target.len() as f64;
    let mean = target.iter().sum::<f64>() / n;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot <= 0.0 {
        return Err(Error::Domain("target variance is zero".into()));
    }
    let ss_res: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Mean silhouette over points: (b−a)/max(a,b) with a the mean
/// intra-cluster distance (excluding self) and b the smallest mean
/// distance to another cluster. Singleton-cluster points contribute 0.
pub fn silhouette(points: &Matrix, assignments: &[usize]) -> Result<f64> {
    let n = points.rows();
    if assignments.len() != n {
        return Err(Error::Dimension(format!(
            "{n} points but {} assignments",
            assignments.len()
        )));
    }
    let mut present: Vec<usize> = assignments.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 || present.len() > n {
        return Err(Error::Domain(format!(
            "silhouette needs between 2 and {n} clusters, found {}",
            present.len()
        )));
    }
    let dist = |i: usize, j: usize| -> f64 {
        points
            .row(i)
            .iter()
            .zip(points.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let count_of = |c: usize| assignments.iter().filter(|&&a| a == c).count();
    let mut total = 0.0;
    for i in 0..n {
        let own = assignments[i];
        let own_size = count_of(own);
        if own_size == 1 {
            continue; // contributes 0
        }
        let mut a = 0.0;
        for j in 0..n {
            if j != i && assignments[j] == own {
                a += dist(i, j);
            }
        }
        a /= (own_size - 1) as f64;
        let mut b = f64::INFINITY;
        for &c in &present {
            if c == own {
                continue;
            }
            let mut acc = 0.0;
            let mut cnt = 0usize;
            for j in 0..n {
                if assignments[j] == c {
                    acc += dist(i, j);
                    cnt += 1;
                }
            }
            b = b.min(acc / cnt as f64);
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Maps any metric onto [0,1] so heterogeneous tasks can be averaged.
/// AUROC family is already there; R² is clamped; silhouette is
/// shifted from [−1,1].
pub fn normalize_score(kind: MetricKind, raw: f64) -> f64 {
    match kind {
        MetricKind::Auroc | MetricKind::AveragedAuroc => raw,
        MetricKind::RSquared => raw.clamp(0.0, 1.0),
        MetricKind::Silhouette => (raw + 1.0) / 2.0,
    }
}

/// Scores every task of `model` on the given rows. Tasks that are
/// undefined on this data (no labels, a single class, zero target
/// variance) are omitted from the report; structural errors propagate.
pub fn score_model(
    model: &Model,
    ds: &Dataset,
    rows: &[usize],
    seed: u64,
) -> Result<Vec<ScoreReport>> {
    let mut reports = Vec::new();
    let supervised = model.supervised_tasks();
    let preds = if supervised.is_empty() {
        Vec::new()
    } else {
        model.predict(ds, rows)?
    };
    for (task_idx, spec) in model.tasks().iter().enumerate() {
        let metric = MetricKind::for_class(spec.class);
        if spec.class == ProblemClass::Cluster {
            if rows.len() < 3 {
                continue;
            }
            let latents = model.cluster_latents(ds, rows)?;
            let k = spec.cluster_k();
            if k >= rows.len() {
                continue;
            }
            let clusters = kmeans(&latents, k, seed, DEFAULT_RESTARTS)?;
            let raw = match silhouette(&latents, &clusters.assignments) {
                Ok(v) => v,
                Err(Error::Domain(_)) => continue,
                Err(e) => return Err(e),
            };
            reports.push(ScoreReport {
                task: spec.name.clone(),
                metric,
                raw,
                normalized: normalize_score(metric, raw),
                n_evaluated: rows.len(),
            });
            continue;
        }
        let labeled: Vec<usize> = (0..rows.len())
            .filter(|&p| ds.label(rows[p], task_idx).is_some())
            .collect();
        if labeled.is_empty() {
            continue;
        }
        let targets: Vec<f64> = labeled
            .iter()
            .map(|&p| ds.label(rows[p], task_idx).unwrap())
            .collect();
        let output = &preds
            .iter()
            .find(|(name, _)| *name == spec.name)
            .expect("supervised task present in predictions")
            .1;
        let raw = match output {
            TaskOutput::Binary(p) => {
                let scores: Vec<f64> = labeled.iter().map(|&i| p[i]).collect();
                auroc(&scores, &targets)
            }
            TaskOutput::Multiclass(lp) => {
                let mut sub = Matrix::zeros(labeled.len(), lp.cols());
                for (r, &i) in labeled.iter().enumerate() {
                    sub.row_mut(r).copy_from_slice(lp.row(i));
                }
                let classes: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
                averaged_auroc(&sub, &classes)
            }
            TaskOutput::Regression(y) => {
                let scores: Vec<f64> = labeled.iter().map(|&i| y[i]).collect();
                r_squared(&scores, &targets)
            }
        };
        let raw = match raw {
            Ok(v) => v,
            Err(Error::Domain(_)) => continue,
            Err(e) => return Err(e),
        };
        reports.push(ScoreReport {
            task: spec.name.clone(),
            metric,
            raw,
            normalized: normalize_score(metric, raw),
            n_evaluated: labeled.len(),
        });
    }
    Ok(reports)
}

/// One CSV record per task: `task,metric,raw,normalized,n`.
pub fn report_csv(reports: &[ScoreReport]) -> String {
    let mut out = String::from("task,metric,raw,normalized,n\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.task, r.metric, r.raw, r.normalized, r.n_evaluated
        ));
    }
    out
}

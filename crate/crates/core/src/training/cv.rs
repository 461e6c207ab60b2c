//! Hyperparameter selection: 5-fold patient-level cross-validation
//! over the batch-size x learning-rate grid, averaging normalized
//! task scores over tasks then folds.

use crate::data::dataset::Dataset;
use crate::data::split::kfold_by_patient;
use crate::error::{Error, Result};
use crate::evaluation::score_model;
use crate::seeding::derive_seed;
use crate::training::trainer::{train, TrainConfig, TrainedModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const CV_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub batch_size: usize,
    pub learning_rate: f64,
}

/// One grid point's cross-validation outcome. `fold_scores[f]` is the
/// mean normalized score over scoreable tasks of fold f, None when
/// the fold had none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub point: GridPoint,
    pub fold_scores: Vec<Option<f64>>,
    pub mean_normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub best: GridPoint,
    pub table: Vec<GridScore>,
    pub n_folds: usize,
}

impl CvReport {
    /// CSV export: `batch_size,learning_rate,mean_normalized,selected`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch_size,learning_rate,mean_normalized,selected\n");
        for row in &self.table {
            let selected = row.point == self.best;
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.point.batch_size, row.point.learning_rate, row.mean_normalized, selected
            ));
        }
        out
    }
}

/// Picks the argmax by mean normalized score; exact ties go to the
/// lexicographically smaller (batch_size, learning_rate) pair.
pub(crate) fn select_best(table: &[GridScore]) -> Result<GridPoint> {
    let mut order: Vec<usize> = (0..table.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&table[a].point, &table[b].point);
        pa.batch_size
            .cmp(&pb.batch_size)
            .then(pa.learning_rate.partial_cmp(&pb.learning_rate).unwrap())
    });
    let mut best: Option<usize> = None;
    for &i in &order {
        if !table[i].mean_normalized.is_finite() {
            continue;
        }
        if best.is_none_or(|b| table[i].mean_normalized > table[b].mean_normalized) {
            best = Some(i);
        }
    }
    best.map(|i| table[i].point)
        .ok_or_else(|| Error::Domain("no grid point produced a finite score".into()))
}

/// Trains each grid point on each of the 5 patient-level folds,
/// scores validation folds with per-class metrics, normalizes, and
/// averages over tasks then folds.
pub fn cross_validate(config: &TrainConfig, ds: &Dataset) -> Result<CvReport> {
    config.validate()?;
    let folds = kfold_by_patient(ds, CV_FOLDS, derive_seed(config.seed, "cv.folds"))?;
    let mut grid = Vec::new();
    for &bs in &config.batch_sizes {
        for &lr in &config.learning_rates {
            grid.push(GridPoint {
                batch_size: bs,
                learning_rate: lr,
            });
        }
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..folds.len()).map(move |f| (g, f)))
        .collect();
    let outcomes: Result<Vec<((usize, usize), Option<f64>)>> = jobs
        .par_iter()
        .map(|&(g, f)| {
            let point = grid[g];
            let ctx = format!(
                "grid point (batch_size={}, learning_rate={}) fold {f}",
                point.batch_size, point.learning_rate
            );
            let (fold_train, fold_val) = &folds[f];
            let label = format!(
                "cv.bs{}.lr{}.fold{f}",
                point.batch_size, point.learning_rate
            );
            let tm = train(
                config,
                fold_train,
                point.batch_size,
                point.learning_rate,
                derive_seed(config.seed, &label),
            )
            .map_err(|e| e.context(&ctx))?;
            let rows: Vec<usize> = (0..fold_val.n_samples()).collect();
            let reports = score_model(
                &tm.model,
                fold_val,
                &rows,
                derive_seed(config.seed, &format!("{label}.score")),
            )
            .map_err(|e| e.context(&ctx))?;
            let score = if reports.is_empty() {
                None
            } else {
                Some(
                    reports.iter().map(|r| r.normalized).sum::<f64>() / reports.len() as f64,
                )
            };
            Ok(((g, f), score))
        })
        .collect();
    let mut outcomes = outcomes?;
    outcomes.sort_by_key(|&(key, _)| key);

    let mut table = Vec::with_capacity(grid.len());
    for (g, point) in grid.iter().enumerate() {
        let fold_scores: Vec<Option<f64>> = outcomes
            .iter()
            .filter(|((og, _), _)| *og == g)
            .map(|(_, s)| *s)
            .collect();
        let defined: Vec<f64> = fold_scores.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::Domain(format!(
                "grid point (batch_size={}, learning_rate={}): no fold produced a scoreable task",
                point.batch_size, point.learning_rate
            )));
        }
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        table.push(GridScore {
            point: *point,
            fold_scores,
            mean_normalized: mean,
        });
    }
    let best = select_best(&table)?;
    Ok(CvReport {
        best,
        table,
        n_folds: folds.len(),
    })
}

/// Cross-validates, then trains the final model on the full training
/// set with the winning hyperparameters.
pub fn select_and_train(config: &TrainConfig, ds: &Dataset) -> Result<(CvReport, TrainedModel)> {
    let report = cross_validate(config, ds)?;
    let tm = train(
        config,
        ds,
        report.best.batch_size,
        report.best.learning_rate,
        derive_seed(config.seed, "final.train"),
    )?;
    Ok((report, tm))
}

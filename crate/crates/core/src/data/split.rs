//! Patient-level splitting: no patient's samples ever cross a
//! train/test or train/validation boundary.

use crate::data::dataset::Dataset;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

pub const DEFAULT_TEST_FRACTION: f64 = 0.20;
pub const DEFAULT_FOLDS: usize = 5;

fn rows_of_patients(ds: &Dataset, patients: &HashSet<&str>) -> Vec<usize> {
    (0..ds.n_samples())
        .filter(|&r| patients.contains(ds.samples()[r].patient_id.as_str()))
        .collect()
}

/// Seeded patient-grouped holdout. Test side gets
/// round(test_fraction x patients) patients.
pub fn split_by_patient(
    ds: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Domain(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut patients = ds.patient_order();
    if patients.len() < 2 {
        return Err(Error::Domain(format!(
            "{} patient(s) cannot be split",
            patients.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let n_test = (test_fraction * patients.len() as f64).round() as usize;
    let test_set: HashSet<&str> = patients[..n_test].iter().map(|s| s.as_str()).collect();
    let train_set: HashSet<&str> = patients[n_test..].iter().map(|s| s.as_str()).collect();
    let train = ds.subset_samples(&rows_of_patients(ds, &train_set))?;
    let test = ds.subset_samples(&rows_of_patients(ds, &test_set))?;
    Ok((train, test))
}

/// Seeded patient-grouped k-fold: returns k (train, validation) pairs
/// whose validation folds partition the patients.
pub fn kfold_by_patient(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    if k < 2 {
        return Err(Error::Domain(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut patients = ds.patient_order();
    if patients.len() < k {
        return Err(Error::Domain(format!(
            "{} patients cannot form {k} folds",
            patients.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    // Contiguous blocks over the shuffled order; the first
    // (n mod k) folds take the extra patient.
    let n = patients.len();
    let base = n / k;
    let extra = n % k;
    let mut folds: Vec<Vec<&str>> = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(patients[start..start + len].iter().map(|s| s.as_str()).collect());
        start += len;
    }
    let mut out = Vec::with_capacity(k);
    for f in 0..k {
        let val_set: HashSet<&str> = folds[f].iter().copied().collect();
        let train_set: HashSet<&str> = folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != f)
            .flat_map(|(_, fold)| fold.iter().copied())
            .collect();
        let train = ds.subset_samples(&rows_of_patients(ds, &train_set))?;
        let val = ds.subset_samples(&rows_of_patients(ds, &val_set))?;
        out.push((train, val));
    }
    Ok(out)
}

//! Performance oracles: the pluggable "score of task i after joint
//! training on a task set" function that the interaction math runs on.

use crate::data::dataset::Dataset;
use crate::data::split::{split_by_patient, DEFAULT_TEST_FRACTION};
use crate::error::{Error, Result};
use crate::evaluation::score_model;
use crate::seeding::derive_seed;
use crate::training::{select_and_train, train, TrainConfig};
use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

/// Source of performance scores. `measured` must belong to
/// `task_set`, and repeated calls with identical arguments must
/// return identical values.
pub trait PerformanceOracle: Sync {
    fn score(&self, task_set: &BTreeSet<String>, measured: &str) -> Result<f64>;
}

/// Builds the canonical set form from task names.
pub fn task_set(names: &[&str]) -> BTreeSet<String> {
    names.iter().map(|n| n.to_string()).collect()
}

pub(crate) fn check_membership(task_set: &BTreeSet<String>, measured: &str) -> Result<()> {
    if !task_set.contains(measured) {
        return Err(Error::Contract(format!(
            "measured task {measured} is not in the task set {{{}}}",
            names_of(task_set).join(", ")
        )));
    }
    Ok(())
}

pub(crate) fn names_of(task_set: &BTreeSet<String>) -> Vec<String> {
    task_set.iter().cloned().collect()
}

/// Fixed score table, the ground-truth oracle for tests and what-if
/// analysis.
#[derive(Debug, Clone, Default)]
pub struct LookupOracle {
    table: HashMap<(BTreeSet<String>, String), f64>,
}

impl LookupOracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, set: &[&str], measured: &str, score: f64) {
        self.table
            .insert((task_set(set), measured.to_string()), score);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl PerformanceOracle for LookupOracle {
    fn score(&self, task_set: &BTreeSet<String>, measured: &str) -> Result<f64> {
        check_membership(task_set, measured)?;
        self.table
            .get(&(task_set.clone(), measured.to_string()))
            .copied()
            .ok_or_else(|| {
                Error::Contract(format!(
                    "lookup oracle has no entry for ({{{}}}, {measured})",
                    names_of(task_set).join(", ")
                ))
            })
    }
}

/// Memoizing wrapper: each distinct (task_set, measured) pair hits
/// the inner oracle once. Safe for concurrent use; a race can at
/// worst evaluate a pair twice on the inner (deterministic) oracle
/// and insert the same value twice.
pub struct CachedOracle<'a> {
    inner: &'a dyn PerformanceOracle,
    cache: Mutex<HashMap<(BTreeSet<String>, String), f64>>,
}

impl<'a> CachedOracle<'a> {
    pub fn new(inner: &'a dyn PerformanceOracle) -> Self {
        CachedOracle {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Number of distinct pairs evaluated so far.
    pub fn unique_evaluations(&self) -> usize {
        self.cache.lock().expect("oracle cache poisoned").len()
    }
}

impl PerformanceOracle for CachedOracle<'_> {
    fn score(&self, task_set: &BTreeSet<String>, measured: &str) -> Result<f64> {
        let key = (task_set.clone(), measured.to_string());
        if let Some(&v) = self.cache.lock().expect("oracle cache poisoned").get(&key) {
            return Ok(v);
        }
        let v = self.inner.score(task_set, measured)?;
        self.cache
            .lock()
            .expect("oracle cache poisoned")
            .insert(key, v);
        Ok(v)
    }
}

/// Production oracle: restrict the dataset to the task set, hold out
/// a patient split, train with the configured pipeline, and report
/// the measured task's normalized held-out score. Deterministic: the
/// run seed is derived from the experiment seed and the sorted task
/// names. Results are memoized internally because each training run
/// is expensive.
pub struct PipelineOracle<'a> {
    ds: &'a Dataset,
    config: TrainConfig,
    test_fraction: f64,
    /// Full grid cross-validation per task set instead of the first
    /// grid entry. Far more expensive; off by default.
    use_cv: bool,
    cache: Mutex<HashMap<(BTreeSet<String>, String), f64>>,
}

impl<'a> PipelineOracle<'a> {
    pub fn new(ds: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(PipelineOracle {
            ds,
            config,
            test_fraction: DEFAULT_TEST_FRACTION,
            use_cv: false,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_cv(mut self, use_cv: bool) -> Self {
        self.use_cv = use_cv;
        self
    }

    pub fn with_test_fraction(mut self, test_fraction: f64) -> Result<Self> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::Domain(format!(
                "test fraction {test_fraction} outside (0, 1)"
            )));
        }
        self.test_fraction = test_fraction;
        Ok(self)
    }

    fn run(&self, set: &BTreeSet<String>, measured: &str) -> Result<f64> {
        let names = names_of(set);
        let restricted = restrict_to_tasks(self.ds, &names)?;
        let run_seed = derive_seed(self.config.seed, &format!("oracle.{}", names.join("+")));
        let (train_ds, test_ds) =
            split_by_patient(&restricted, self.test_fraction, derive_seed(run_seed, "split"))?;
        let mut config = self.config.clone();
        config.seed = run_seed;
        let trained = if self.use_cv {
            select_and_train(&config, &train_ds)?.1
        } else {
            train(
                &config,
                &train_ds,
                config.batch_sizes[0],
                config.learning_rates[0],
                derive_seed(run_seed, "train"),
            )?
        };
        let rows: Vec<usize> = (0..test_ds.n_samples()).collect();
        let reports = score_model(
            &trained.model,
            &test_ds,
            &rows,
            derive_seed(run_seed, "score"),
        )?;
        reports
            .iter()
            .find(|r| r.task == measured)
            .map(|r| r.normalized)
            .ok_or_else(|| {
                Error::Domain(format!(
                    "task {measured} produced no score on the held-out split \
                     (degenerate labels in the test patients?)"
                ))
            })
    }
}

impl PerformanceOracle for PipelineOracle<'_> {
    fn score(&self, task_set: &BTreeSet<String>, measured: &str) -> Result<f64> {
        check_membership(task_set, measured)?;
        let key = (task_set.clone(), measured.to_string());
        if let Some(&v) = self.cache.lock().expect("oracle cache poisoned").get(&key) {
            return Ok(v);
        }
        let v = self
            .run(task_set, measured)
            .map_err(|e| e.context(&format!("oracle run for {{{}}}", names_of(task_set).join(", "))))?;
        self.cache
            .lock()
            .expect("oracle cache poisoned")
            .insert(key, v);
        Ok(v)
    }
}

/// Restriction of a dataset to some of its tasks. Samples whose
/// labels all fall outside the kept supervised tasks are dropped
/// (they cannot satisfy the dataset contract); when no supervised
/// task is kept, every sample stays.
pub fn restrict_to_tasks(ds: &Dataset, names: &[String]) -> Result<Dataset> {
    let mut kept_supervised = Vec::new();
    for n in names {
        let i = ds.task_index(n)?;
        if ds.tasks()[i].class.is_supervised() {
            kept_supervised.push(i);
        }
    }
    let rows: Vec<usize> = if kept_supervised.is_empty() {
        (0..ds.n_samples()).collect()
    } else {
        (0..ds.n_samples())
            .filter(|&r| kept_supervised.iter().any(|&t| ds.label(r, t).is_some()))
            .collect()
    };
    if rows.is_empty() {
        return Err(Error::Domain(format!(
            "no sample carries a label for any of the tasks {{{}}}",
            names.join(", ")
        )));
    }
    ds.subset_samples(&rows)?.subset_tasks(names)
}

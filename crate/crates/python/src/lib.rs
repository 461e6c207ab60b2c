//! Python bindings for the m3h engine: dataset handling, training,
//! scoring, task-interaction analysis, and the numeric self-checks.
//!
//! Configuration is passed as TOML text in the same experiment format
//! the `m3h` binary reads (`[train]`, `[train.model]`, ...), so a
//! notebook and a shell pipeline can share one config file.

use std::path::Path;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use m3h::cli::{bootstrap_compare, pipeline_gradcheck, ExperimentConfig};
use m3h::data::{load_dataset, split_by_patient, synth_generate, write_dataset, SynthConfig};
use m3h::evaluation::score_model;
use m3h::model::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, TaskOutput,
};
use m3h::seeding::derive_seed;
use m3h::tim::{
    greedy_select, restrict_to_tasks, tim_pairs, PipelineOracle, TimEstimator, TimMode,
};
use m3h::training::{select_and_train, train as train_model};

fn to_py(e: m3h::Error) -> PyErr {
    match e {
        m3h::Error::Io(_) => PyIOError::new_err(e.to_string()),
        m3h::Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Parses experiment TOML and applies the same seed precedence as the
/// command line: an explicit `seed` argument beats the file's `seed`,
/// which in turn fixes the training seed.
fn resolve_config(config_toml: &str, seed: Option<u64>) -> PyResult<ExperimentConfig> {
    let mut cfg: ExperimentConfig = toml::from_str(config_toml)
        .map_err(|e| PyValueError::new_err(format!("experiment config: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = Some(s);
    }
    if let Some(s) = cfg.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Applies the config's optional task subset, mirroring `--tasks`.
fn configured_dataset(ds: &Dataset, cfg: &ExperimentConfig) -> PyResult<m3h::data::Dataset> {
    if cfg.tasks.is_empty() {
        Ok(ds.inner.clone())
    } else {
        restrict_to_tasks(&ds.inner, &cfg.tasks).map_err(to_py)
    }
}

/// A multimodal cohort: per-modality embeddings plus task labels.
#[pyclass]
struct Dataset {
    inner: m3h::data::Dataset,
}

#[pymethods]
impl Dataset {
    /// Reads a cohort from a manifest file or its directory.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = load_dataset(Path::new(path)).map_err(to_py)?;
        Ok(Dataset { inner })
    }

    /// Generates a synthetic cohort from generator TOML.
    #[staticmethod]
    fn synthesize(config_toml: &str) -> PyResult<Self> {
        let cfg: SynthConfig = toml::from_str(config_toml)
            .map_err(|e| PyValueError::new_err(format!("generator config: {e}")))?;
        let inner = synth_generate(&cfg).map_err(to_py)?;
        Ok(Dataset { inner })
    }

    /// Writes manifest + CSVs into `dir` and returns the manifest path.
    fn save(&self, dir: &str) -> PyResult<String> {
        let manifest = write_dataset(&self.inner, Path::new(dir)).map_err(to_py)?;
        Ok(manifest.to_string_lossy().into_owned())
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    #[getter]
    fn n_patients(&self) -> usize {
        self.inner.patient_order().len()
    }

    #[getter]
    fn task_names(&self) -> Vec<String> {
        self.inner.tasks().iter().map(|t| t.name.clone()).collect()
    }

    #[getter]
    fn modality_names(&self) -> Vec<String> {
        self.inner.schemas().iter().map(|s| s.name.clone()).collect()
    }

    /// Keeps only the named tasks (and the samples labeled for them).
    fn restrict(&self, tasks: Vec<String>) -> PyResult<Self> {
        let inner = restrict_to_tasks(&self.inner, &tasks).map_err(to_py)?;
        Ok(Dataset { inner })
    }

    /// Patient-grouped holdout split; returns (train, test).
    fn split(&self, test_fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = split_by_patient(&self.inner, test_fraction, seed).map_err(to_py)?;
        Ok((Dataset { inner: a }, Dataset { inner: b }))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} samples, {} patients, {} modalities, {} tasks)",
            self.inner.n_samples(),
            self.inner.patient_order().len(),
            self.inner.schemas().len(),
            self.inner.tasks().len()
        )
    }
}

/// One task's evaluation outcome.
#[pyclass]
struct ScoreRow {
    #[pyo3(get)]
    task: String,
    #[pyo3(get)]
    metric: String,
    #[pyo3(get)]
    raw: f64,
    #[pyo3(get)]
    normalized: f64,
    #[pyo3(get)]
    n: usize,
}

#[pymethods]
impl ScoreRow {
    fn __repr__(&self) -> String {
        format!(
            "ScoreRow(task={:?}, metric={:?}, raw={:.6}, normalized={:.6}, n={})",
            self.task, self.metric, self.raw, self.normalized, self.n
        )
    }
}

/// A trained network; create with `train`/`cv_train` or `Model.load`.
#[pyclass]
struct Model {
    inner: m3h::model::Model,
}

impl Model {
    fn rows_or_all(&self, ds: &Dataset, rows: Option<Vec<usize>>) -> Vec<usize> {
        rows.unwrap_or_else(|| (0..ds.inner.n_samples()).collect())
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = load_checkpoint(Path::new(path)).map_err(to_py)?;
        Ok(Model { inner })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let inner = checkpoint_from_bytes(data).map_err(to_py)?;
        Ok(Model { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, Path::new(path)).map_err(to_py)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = checkpoint_bytes(&self.inner).map_err(to_py)?;
        Ok(PyBytes::new(py, &bytes))
    }

    #[getter]
    fn task_names(&self) -> Vec<String> {
        self.inner.tasks().iter().map(|t| t.name.clone()).collect()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.config().seed
    }

    /// Per-task predictions: binary tasks map to probabilities,
    /// regression to raw values, multiclass to per-class log-prob rows.
    #[pyo3(signature = (ds, rows=None))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        ds: &Dataset,
        rows: Option<Vec<usize>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let rows = self.rows_or_all(ds, rows);
        let preds = self.inner.predict(&ds.inner, &rows).map_err(to_py)?;
        let out = PyDict::new(py);
        for (name, output) in preds {
            match output {
                TaskOutput::Binary(p) => out.set_item(name, p)?,
                TaskOutput::Regression(v) => out.set_item(name, v)?,
                TaskOutput::Multiclass(m) => {
                    let table: Vec<Vec<f64>> =
                        (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
                    out.set_item(name, table)?
                }
            }
        }
        Ok(out)
    }

    /// Autoencoder latent vector per requested row.
    #[pyo3(signature = (ds, rows=None))]
    fn latents(&self, ds: &Dataset, rows: Option<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
        let rows = self.rows_or_all(ds, rows);
        let m = self.inner.cluster_latents(&ds.inner, &rows).map_err(to_py)?;
        Ok((0..m.rows()).map(|r| m.row(r).to_vec()).collect())
    }

    /// Scores every scoreable task. The default clustering seed is
    /// derived from the model seed, matching the `eval` command, so
    /// training-time and evaluation metrics agree.
    #[pyo3(signature = (ds, rows=None, seed=None))]
    fn score(
        &self,
        ds: &Dataset,
        rows: Option<Vec<usize>>,
        seed: Option<u64>,
    ) -> PyResult<Vec<ScoreRow>> {
        let rows = self.rows_or_all(ds, rows);
        let seed = seed.unwrap_or_else(|| derive_seed(self.inner.config().seed, "eval.kmeans"));
        let reports = score_model(&self.inner, &ds.inner, &rows, seed).map_err(to_py)?;
        Ok(reports
            .into_iter()
            .map(|r| ScoreRow {
                task: r.task,
                metric: r.metric.as_str().to_string(),
                raw: r.raw,
                normalized: r.normalized,
                n: r.n_evaluated,
            })
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({} tasks, {} modalities, seed {})",
            self.inner.tasks().len(),
            self.inner.schemas().len(),
            self.inner.config().seed
        )
    }
}

/// Grid-search outcome of `cv_train`.
#[pyclass]
struct CvOutcome {
    #[pyo3(get)]
    batch_size: usize,
    #[pyo3(get)]
    learning_rate: f64,
    #[pyo3(get)]
    n_folds: usize,
    /// Full table as `batch_size,learning_rate,mean_normalized,selected` CSV.
    #[pyo3(get)]
    table_csv: String,
}

#[pymethods]
impl CvOutcome {
    fn __repr__(&self) -> String {
        format!(
            "CvOutcome(batch_size={}, learning_rate={}, n_folds={})",
            self.batch_size, self.learning_rate, self.n_folds
        )
    }
}

/// One ordered pair's task-interaction score.
#[pyclass]
struct InteractionScore {
    #[pyo3(get)]
    source: String,
    #[pyo3(get)]
    added: String,
    #[pyo3(get)]
    delta: f64,
    #[pyo3(get)]
    mode: String,
    #[pyo3(get)]
    n_subsets: usize,
    #[pyo3(get)]
    seed: Option<u64>,
}

#[pymethods]
impl InteractionScore {
    fn __repr__(&self) -> String {
        format!(
            "InteractionScore({} + {}: {:+.6}, {} over {} subsets)",
            self.source, self.added, self.delta, self.mode, self.n_subsets
        )
    }
}

/// Outcome of the beam search over training companions.
#[pyclass]
struct Selection {
    /// Best task set found, sorted, source included.
    #[pyo3(get)]
    best: Vec<String>,
    #[pyo3(get)]
    best_score: f64,
    #[pyo3(get)]
    n_rounds: usize,
}

#[pymethods]
impl Selection {
    fn __repr__(&self) -> String {
        format!(
            "Selection({} at {:.6}, {} rounds)",
            self.best.join("+"),
            self.best_score,
            self.n_rounds
        )
    }
}

/// Paired bootstrap comparison of two score columns.
#[pyclass]
struct Comparison {
    #[pyo3(get)]
    mean_delta: f64,
    #[pyo3(get)]
    lower: f64,
    #[pyo3(get)]
    upper: f64,
}

#[pymethods]
impl Comparison {
    fn __repr__(&self) -> String {
        format!(
            "Comparison(mean_delta={:+.6}, ci95=[{:+.6}, {:+.6}])",
            self.mean_delta, self.lower, self.upper
        )
    }
}

/// Trains at the first grid point of the experiment config.
#[pyfunction]
#[pyo3(signature = (ds, config_toml="", seed=None))]
fn train(ds: &Dataset, config_toml: &str, seed: Option<u64>) -> PyResult<Model> {
    let cfg = resolve_config(config_toml, seed)?;
    let data = configured_dataset(ds, &cfg)?;
    let tc = &cfg.train;
    let trained = train_model(tc, &data, tc.batch_sizes[0], tc.learning_rates[0], tc.seed)
        .map_err(to_py)?;
    Ok(Model { inner: trained.model })
}

/// Grid search by patient-level cross-validation, then a final fit at
/// the winning point. Returns (model, cv outcome).
#[pyfunction]
#[pyo3(signature = (ds, config_toml="", seed=None))]
fn cv_train(ds: &Dataset, config_toml: &str, seed: Option<u64>) -> PyResult<(Model, CvOutcome)> {
    let cfg = resolve_config(config_toml, seed)?;
    let data = configured_dataset(ds, &cfg)?;
    let (report, trained) = select_and_train(&cfg.train, &data).map_err(to_py)?;
    Ok((
        Model { inner: trained.model },
        CvOutcome {
            batch_size: report.best.batch_size,
            learning_rate: report.best.learning_rate,
            n_folds: report.n_folds,
            table_csv: report.to_csv(),
        },
    ))
}

/// Task-interaction score for every ordered task pair, each measured
/// by retraining the pipeline on the relevant task subsets.
#[pyfunction]
#[pyo3(signature = (ds, config_toml="", mode=None, samples=None, seed=None, cv=None))]
fn interaction_scores(
    ds: &Dataset,
    config_toml: &str,
    mode: Option<&str>,
    samples: Option<usize>,
    seed: Option<u64>,
    cv: Option<bool>,
) -> PyResult<Vec<InteractionScore>> {
    let mut cfg = resolve_config(config_toml, seed)?;
    if let Some(m) = mode {
        cfg.tim_mode = m.parse::<TimMode>().map_err(to_py)?;
    }
    if let Some(s) = samples {
        cfg.tim_samples = s;
    }
    if let Some(c) = cv {
        cfg.oracle_cv = c;
    }
    let data = configured_dataset(ds, &cfg)?;
    let tasks: Vec<String> = data.tasks().iter().map(|t| t.name.clone()).collect();
    if tasks.len() < 2 {
        return Err(PyValueError::new_err(
            "interaction scores need at least 2 tasks",
        ));
    }
    let estimator = match cfg.tim_mode {
        TimMode::Exact => TimEstimator::Exact,
        TimMode::Pairwise => TimEstimator::Pairwise,
        TimMode::Sampled => TimEstimator::Sampled {
            n_samples: cfg.tim_samples,
            seed: derive_seed(cfg.train.seed, "tim.sampled"),
        },
    };
    let oracle = PipelineOracle::new(&data, cfg.train.clone())
        .map_err(to_py)?
        .with_cv(cfg.oracle_cv);
    let results = tim_pairs(&oracle, &tasks, &estimator).map_err(to_py)?;
    Ok(results
        .into_iter()
        .map(|r| InteractionScore {
            source: r.source,
            added: r.added,
            delta: r.delta,
            mode: r.mode.to_string(),
            n_subsets: r.n_subsets_used,
            seed: r.seed,
        })
        .collect())
}

/// Beam search for the training companions that most improve `source`.
#[pyfunction]
#[pyo3(signature = (ds, source, config_toml="", beam=None, seed=None, cv=None))]
fn select_tasks(
    ds: &Dataset,
    source: &str,
    config_toml: &str,
    beam: Option<usize>,
    seed: Option<u64>,
    cv: Option<bool>,
) -> PyResult<Selection> {
    let mut cfg = resolve_config(config_toml, seed)?;
    if let Some(b) = beam {
        cfg.beam_width = b;
    }
    if let Some(c) = cv {
        cfg.oracle_cv = c;
    }
    let data = configured_dataset(ds, &cfg)?;
    let tasks: Vec<String> = data.tasks().iter().map(|t| t.name.clone()).collect();
    if !tasks.iter().any(|t| t == source) {
        return Err(PyValueError::new_err(format!(
            "source task {source:?} not in the dataset (tasks: {})",
            tasks.join(", ")
        )));
    }
    let candidates: Vec<String> = tasks.into_iter().filter(|t| t != source).collect();
    let oracle = PipelineOracle::new(&data, cfg.train.clone())
        .map_err(to_py)?
        .with_cv(cfg.oracle_cv);
    let result = greedy_select(&oracle, source, &candidates, cfg.beam_width).map_err(to_py)?;
    Ok(Selection {
        best: result.best,
        best_score: result.best_score,
        n_rounds: result.rounds.len(),
    })
}

/// Compares analytic gradients against central finite differences on
/// seeded random instances of the full pipeline. Returns the max
/// relative error per point.
#[pyfunction]
#[pyo3(signature = (points=10, seed=0))]
fn gradient_check(points: usize, seed: u64) -> PyResult<Vec<f64>> {
    pipeline_gradcheck(points, seed).map_err(to_py)
}

/// Paired percentile bootstrap of mean(a - b) with a 95% interval.
#[pyfunction]
#[pyo3(signature = (a, b, n_boot=1000, seed=0))]
fn compare_scores(a: Vec<f64>, b: Vec<f64>, n_boot: usize, seed: u64) -> PyResult<Comparison> {
    let r = bootstrap_compare(&a, &b, n_boot, seed).map_err(to_py)?;
    Ok(Comparison {
        mean_delta: r.mean_delta,
        lower: r.lower,
        upper: r.upper,
    })
}

#[pymodule]
fn m3h_python(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<ScoreRow>()?;
    m.add_class::<CvOutcome>()?;
    m.add_class::<InteractionScore>()?;
    m.add_class::<Selection>()?;
    m.add_class::<Comparison>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(cv_train, m)?)?;
    m.add_function(wrap_pyfunction!(interaction_scores, m)?)?;
    m.add_function(wrap_pyfunction!(select_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(compare_scores, m)?)?;
    Ok(())
}

//! Command-line front end: configuration parsing, subcommand
//! dispatch, and artifact export. Configuration is file-first (a TOML
//! experiment file) with flag overrides; every run is reproducible,
//! so identical (config, seed) pairs write byte-identical artifacts.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage or config error.


use crate::data::{load_dataset, synth_generate, write_dataset, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{report_csv, score_model};
use crate::ioutil::atomic_write;
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig, TaskOutput};
use crate::numerics::gradient_check;
use crate::seeding::derive_seed;
use crate::tim::{
    greedy_select, heatmap_csv, pairs_to_matrix, restrict_to_tasks, tim_csv, tim_pairs,
    GreedyResult, PipelineOracle, TimEstimator, TimMode, DEFAULT_BEAM_WIDTH,
};
use crate::training::{select_and_train, train, TrainConfig, TrainedModel};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Largest acceptable max relative error for the `gradcheck`
/// subcommand to report success.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Finite-difference step used by the `gradcheck` subcommand.
pub const GRADCHECK_EPS: f64 = 5e-5;

const DEFAULT_TIM_SAMPLES: usize = 256;
const DEFAULT_N_BOOT: usize = 1000;

/// Experiment file contents. Every field has a default, so an empty
/// file is valid; command-line flags override the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Dataset manifest path.
    pub dataset: Option<PathBuf>,
    /// Task subset by name; empty means every task in the manifest.
    pub tasks: Vec<String>,
    pub train: TrainConfig,
    /// Run grid cross-validation inside the interaction/selection
    /// oracle instead of training at the first grid point.
    pub oracle_cv: bool,
    pub tim_mode: TimMode,
    /// Subset draws per pair in sampled mode.
    pub tim_samples: usize,
    pub beam_width: usize,
    /// Bootstrap resample count for score comparisons.
    pub n_boot: usize,
    /// Output directory for artifacts.
    pub out: Option<PathBuf>,
    /// Root seed; the --seed flag beats this, and this beats
    /// train.seed.
    pub seed: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            tasks: Vec::new(),
            train: TrainConfig::default(),
            oracle_cv: false,
            tim_mode: TimMode::Pairwise,
            tim_samples: DEFAULT_TIM_SAMPLES,
            beam_width: DEFAULT_BEAM_WIDTH,
            n_boot: DEFAULT_N_BOOT,
            out: None,
            seed: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Error::Format(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "m3h",
    version,
    about = "multimodal multitask learning engine",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write manifest + CSVs.
    Synth(SynthArgs),
    /// Fit one model at the first grid point; write checkpoint,
    /// metrics and training log.
    Train(RunArgs),
    /// Cross-validated grid selection, then a final fit on all data.
    Cv(RunArgs),
    /// Score a saved checkpoint on a dataset.
    Eval(EvalArgs),
    /// Export the pairwise task-interaction matrix.
    Tim(TimArgs),
    /// Beam search for the training companions of one task.
    Select(SelectArgs),
    /// Check pipeline gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Paired bootstrap comparison of two per-sample score files.
    Compare(CompareArgs),
}

/// Flags shared by the subcommands that fit models.
#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest path (overrides the config file).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for artifacts (overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated task subset, e.g. --tasks a,b,c.
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
    /// Cross-exploration strength override.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Generator configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving manifest + CSVs.
    #[arg(long)]
    out: PathBuf,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint file written by train or cv.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics + predictions; stdout only when
    /// absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TimArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Estimator: pairwise, exact or sampled.
    #[arg(long)]
    mode: Option<TimMode>,
    /// Subset draws per pair in sampled mode.
    #[arg(long)]
    samples: Option<usize>,
    /// Cross-validate grid points inside the oracle.
    #[arg(long)]
    cv: bool,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Task whose companions are being chosen.
    #[arg(long)]
    source: String,
    /// Beam width.
    #[arg(long)]
    beam: Option<usize>,
    /// Cross-validate grid points inside the oracle.
    #[arg(long)]
    cv: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Base seed for the checked points.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of seeded model/data points to check.
    #[arg(long, default_value_t = 10)]
    points: usize,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Candidate per-sample scores (CSV).
    #[arg(long)]
    a: PathBuf,
    /// Baseline per-sample scores (CSV).
    #[arg(long)]
    b: PathBuf,
    /// Score column name in both files.
    #[arg(long, default_value = "score")]
    column: String,
    /// Bootstrap resample count.
    #[arg(long, default_value_t = DEFAULT_N_BOOT)]
    boot: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional output CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Subcommand failure routed to an exit code: usage and configuration
/// problems exit 2, runtime errors exit 1.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CmdResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Parses argv (binary name included) and dispatches. Errors never
/// escape: they are printed to stderr and mapped to the exit code.
pub fn run(args: &[String]) -> Result<ExitCode> {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return Ok(match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(2)
                }
            });
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => Ok(ExitCode::SUCCESS),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            Ok(ExitCode::from(2))
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(1))
        }
    }
}

fn dispatch(command: &Command) -> CmdResult<()> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Cv(args) => cmd_cv(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Tim(args) => cmd_tim(args),
        Command::Select(args) => cmd_select(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

/// A run with the config file read, flags folded in, the dataset
/// loaded and restricted to the requested tasks, and the seed chain
/// (--seed > config seed > train.seed) resolved into train.seed.
struct Resolved {
    ds: Dataset,
    /// Resolved task names in dataset declaration order.
    tasks: Vec<String>,
    cfg: ExperimentConfig,
    out: Option<PathBuf>,
}

fn resolve(args: &RunArgs) -> CmdResult<Resolved> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::from_path(p).map_err(|e| usage(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &args.data {
        cfg.dataset = Some(d.clone());
    }
    if !args.tasks.is_empty() {
        cfg.tasks = args.tasks.clone();
    }
    if let Some(a) = args.alpha {
        cfg.train.model.alpha = a;
    }
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if let Some(s) = cfg.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    cfg.train
        .validate()
        .map_err(|e| usage(format!("train config: {e}")))?;
    let manifest = cfg
        .dataset
        .clone()
        .ok_or_else(|| usage("no dataset given (--data or `dataset` in the config file)"))?;
    let full = load_dataset(&manifest)?;
    let all: Vec<String> = full.tasks().iter().map(|t| t.name.clone()).collect();
    let tasks = if cfg.tasks.is_empty() {
        all
    } else {
        for name in &cfg.tasks {
            if !all.contains(name) {
                return Err(usage(format!(
                    "task {name:?} not in the dataset (tasks: {})",
                    all.join(", ")
                )));
            }
        }
        all.into_iter()
            .filter(|n| cfg.tasks.contains(n))
            .collect()
    };
    let ds = if tasks.len() < full.tasks().len() {
        restrict_to_tasks(&full, &tasks)?
    } else {
        full
    };
    let out = cfg.out.clone();
    Ok(Resolved {
        ds,
        tasks,
        cfg,
        out,
    })
}

fn require_out(r: &Resolved) -> CmdResult<PathBuf> {
    r.out
        .clone()
        .ok_or_else(|| usage("no output directory given (--out or `out` in the config file)"))
}

fn cmd_synth(args: &SynthArgs) -> CmdResult<()> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        usage(format!("cannot read {}: {e}", args.config.display()))
    })?;
    let mut cfg: SynthConfig = toml::from_str(&text)
        .map_err(|e| usage(format!("config {}: {e}", args.config.display())))?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let ds = synth_generate(&cfg)?;
    let manifest = write_dataset(&ds, &args.out)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

/// The seed of the k-means pass inside scoring. Derived from the
/// checkpointed model seed, so scoring a reloaded checkpoint on the
/// same rows reproduces the metrics recorded at train time.
fn eval_seed(model: &Model) -> u64 {
    derive_seed(model.config().seed, "eval.kmeans")
}

/// Scores on all rows, then writes model.ckpt, metrics.csv and
/// train_log.csv into `out`. Returns the metrics CSV.
fn write_fit_artifacts(out: &Path, trained: &TrainedModel, ds: &Dataset) -> CmdResult<String> {
    let rows: Vec<usize> = (0..ds.n_samples()).collect();
    let reports = score_model(&trained.model, ds, &rows, eval_seed(&trained.model))?;
    let metrics = report_csv(&reports);
    save_checkpoint(&trained.model, &out.join("model.ckpt"))?;
    atomic_write(&out.join("metrics.csv"), metrics.as_bytes())?;
    atomic_write(&out.join("train_log.csv"), trained.log_csv().as_bytes())?;
    Ok(metrics)
}

fn cmd_train(args: &RunArgs) -> CmdResult<()> {
    let r = resolve(args)?;
    let out = require_out(&r)?;
    let tc = &r.cfg.train;
    let trained = train(tc, &r.ds, tc.batch_sizes[0], tc.learning_rates[0], tc.seed)?;
    let metrics = write_fit_artifacts(&out, &trained, &r.ds)?;
    print!("{metrics}");
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

fn cmd_cv(args: &RunArgs) -> CmdResult<()> {
    let r = resolve(args)?;
    let out = require_out(&r)?;
    let (report, trained) = select_and_train(&r.cfg.train, &r.ds)?;
    atomic_write(&out.join("cv_table.csv"), report.to_csv().as_bytes())?;
    let metrics = write_fit_artifacts(&out, &trained, &r.ds)?;
    println!(
        "selected batch_size={} learning_rate={}",
        report.best.batch_size, report.best.learning_rate
    );
    print!("{metrics}");
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CmdResult<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let full = load_dataset(&args.data)?;
    let names: Vec<String> = model.tasks().iter().map(|t| t.name.clone()).collect();
    let ds = restrict_to_tasks(&full, &names)?;
    let rows: Vec<usize> = (0..ds.n_samples()).collect();
    let reports = score_model(&model, &ds, &rows, eval_seed(&model))?;
    let metrics = report_csv(&reports);
    print!("{metrics}");
    if let Some(out) = &args.out {
        atomic_write(&out.join("metrics.csv"), metrics.as_bytes())?;
        let preds = predictions_csv(&model, &ds, &rows)?;
        atomic_write(&out.join("predictions.csv"), preds.as_bytes())?;
    }
    Ok(())
}

/// Per-sample predictions: probability for binary tasks, argmax class
/// index for multiclass, raw value for regression.
fn predictions_csv(model: &Model, ds: &Dataset, rows: &[usize]) -> Result<String> {
    let mut out = String::from("sample_id,task,value\n");
    if model.supervised_tasks().is_empty() {
        return Ok(out);
    }
    for (name, output) in &model.predict(ds, rows)? {
        for (i, &row) in rows.iter().enumerate() {
            let sid = &ds.samples()[row].sample_id;
            let v = match output {
                TaskOutput::Binary(p) => p[i],
                TaskOutput::Regression(y) => y[i],
                TaskOutput::Multiclass(logp) => {
                    let mut best = 0;
                    for c in 1..logp.cols() {
                        if logp.get(i, c) > logp.get(i, best) {
                            best = c;
                        }
                    }
                    best as f64
                }
            };
            let _ = writeln!(out, "{sid},{name},{v}");
        }
    }
    Ok(out)
}

fn cmd_tim(args: &TimArgs) -> CmdResult<()> {
    let r = resolve(&args.run)?;
    let out = require_out(&r)?;
    let mut cfg = r.cfg;
    if let Some(m) = args.mode {
        cfg.tim_mode = m;
    }
    if let Some(s) = args.samples {
        cfg.tim_samples = s;
    }
    if args.cv {
        cfg.oracle_cv = true;
    }
    if r.tasks.len() < 2 {
        return Err(usage("interaction scores need at least 2 tasks"));
    }
    let estimator = match cfg.tim_mode {
        TimMode::Exact => TimEstimator::Exact,
        TimMode::Pairwise => TimEstimator::Pairwise,
        TimMode::Sampled => TimEstimator::Sampled {
            n_samples: cfg.tim_samples,
            seed: derive_seed(cfg.train.seed, "tim.sampled"),
        },
    };
    let oracle = PipelineOracle::new(&r.ds, cfg.train.clone())?.with_cv(cfg.oracle_cv);
    let results = tim_pairs(&oracle, &r.tasks, &estimator)?;
    let matrix = pairs_to_matrix(&r.tasks, &results)?;
    let heatmap = heatmap_csv(&r.tasks, &matrix)?;
    atomic_write(&out.join("tim_pairs.csv"), tim_csv(&results).as_bytes())?;
    atomic_write(&out.join("tim_heatmap.csv"), heatmap.as_bytes())?;
    print!("{heatmap}");
    println!("wrote {}", out.join("tim_pairs.csv").display());
    Ok(())
}

fn selection_trace_csv(result: &GreedyResult) -> String {
    let mut out = String::from("round,rank,tasks,score\n");
    for (round, sets) in result.rounds.iter().enumerate() {
        for (rank, s) in sets.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                round + 1,
                rank + 1,
                s.tasks.join("+"),
                s.score
            );
        }
    }
    out
}

fn cmd_select(args: &SelectArgs) -> CmdResult<()> {
    let r = resolve(&args.run)?;
    let out = require_out(&r)?;
    let mut cfg = r.cfg;
    if let Some(b) = args.beam {
        cfg.beam_width = b;
    }
    if args.cv {
        cfg.oracle_cv = true;
    }
    if !r.tasks.contains(&args.source) {
        return Err(usage(format!(
            "source task {:?} not in the dataset (tasks: {})",
            args.source,
            r.tasks.join(", ")
        )));
    }
    let candidates: Vec<String> = r
        .tasks
        .iter()
        .filter(|t| **t != args.source)
        .cloned()
        .collect();
    let oracle = PipelineOracle::new(&r.ds, cfg.train.clone())?.with_cv(cfg.oracle_cv);
    let result = greedy_select(&oracle, &args.source, &candidates, cfg.beam_width)?;
    let best_csv = format!(
        "tasks,score\n{},{}\n",
        result.best.join("+"),
        result.best_score
    );
    atomic_write(&out.join("selection_trace.csv"), selection_trace_csv(&result).as_bytes())?;
    atomic_write(&out.join("selection_best.csv"), best_csv.as_bytes())?;
    println!(
        "best set for {}: {} (score {})",
        args.source,
        result.best.join("+"),
        result.best_score
    );
    Ok(())
}

/// Max relative gradient error of the full pipeline (every loss term
/// in one summed graph) at `n_points` seeded random parameter points,
/// on a small synthetic cohort carrying all four task kinds.
///
/// Every parameter entry is redrawn from a seeded normal before the
/// check instead of using the model's own init: zero-init biases put
/// exact zeros on ReLU kinks and inside the contrastive normalizer's
/// guard region, where one-sided slopes make finite differences
/// meaningless. Random draws land at generic smooth points.
pub fn pipeline_gradcheck(n_points: usize, base_seed: u64) -> Result<Vec<f64>> {
    use crate::data::{ModalitySchema, ProblemClass, SynthTask};
    if n_points == 0 {
        return Err(Error::Domain("need at least one point".into()));
    }
    let mut errors = Vec::with_capacity(n_points);
    for point in 0..n_points {
        let seed = derive_seed(base_seed, &format!("gradcheck.point{point}"));
        let synth = SynthConfig {
            n_patients: 6,
            samples_per_patient: 1,
            modalities: vec![
                ModalitySchema {
                    name: "alpha".into(),
                    dim: 3,
                },
                ModalitySchema {
                    name: "beta".into(),
                    dim: 2,
                },
            ],
            tasks: vec![
                SynthTask::binary("b", 0.5),
                SynthTask {
                    name: "m".into(),
                    class: ProblemClass::Multiclass,
                    num_classes: Some(3),
                    cluster_k: None,
                    prevalence: None,
                },
                SynthTask {
                    name: "r".into(),
                    class: ProblemClass::Regression,
                    num_classes: None,
                    cluster_k: None,
                    prevalence: None,
                },
                SynthTask {
                    name: "c".into(),
                    class: ProblemClass::Cluster,
                    num_classes: None,
                    cluster_k: Some(2),
                    prevalence: None,
                },
            ],
            latent_dim: 2,
            task_correlation: 0.5,
            noise_scale: 0.3,
            seed: derive_seed(seed, "data"),
        };
        let ds = synth_generate(&synth)?;
        let model_config = ModelConfig {
            modality_hidden: vec![4, 3],
            shared_hidden: vec![4],
            n_feature: 3,
            contrastive_proj_dim: 2,
            contrastive_temperature: 0.1,
            alpha: 0.1,
            autoencoder_hidden: 4,
            autoencoder_latent: 2,
            seed,
        };
        let model = Model::new(model_config, ds.schemas().to_vec(), ds.tasks().to_vec())?;
        let rows: Vec<usize> = (0..ds.n_samples()).collect();
        let weights = vec![1.0; ds.tasks().len()];
        let summed = model
            .summed_graph(&ds, &rows, 1.0, &weights)?
            .ok_or_else(|| Error::Contract("no loss terms active".into()))?;
        let mut graph = summed.graph;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "params"));
        for (_, id) in graph.params().to_vec() {
            for v in graph.value_mut(id).data_mut() {
                *v = 0.4 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        let report = gradient_check(&mut graph, GRADCHECK_EPS)?;
        errors.push(report.max_relative_error);
    }
    Ok(errors)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CmdResult<()> {
    if args.points == 0 {
        return Err(usage("--points must be >= 1"));
    }
    let errors = pipeline_gradcheck(args.points, args.seed)?;
    let mut worst = 0.0f64;
    for (i, e) in errors.iter().enumerate() {
        println!("point {i}: max relative error {e:.3e}");
        worst = worst.max(*e);
    }
    if worst < GRADCHECK_TOLERANCE {
        println!("gradcheck passed: worst {worst:.3e} < {GRADCHECK_TOLERANCE:.0e}");
        Ok(())
    } else {
        Err(Failure::Run(Error::Numeric(format!(
            "gradient check failed: worst {worst:.3e} >= {GRADCHECK_TOLERANCE:.0e}"
        ))))
    }
}

/// Paired percentile bootstrap of mean(a) - mean(b).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapComparison {
    /// mean(a) - mean(b) on the original pairing.
    pub mean_delta: f64,
    /// 2.5th percentile of the resampled deltas.
    pub lower: f64,
    /// 97.5th percentile of the resampled deltas.
    pub upper: f64,
}

/// Resamples index vectors (paired: the same indices hit both score
/// vectors) and reports the 95% percentile interval of the mean
/// difference. Deterministic in (inputs, n_boot, seed).
pub fn bootstrap_compare(
    scores_a: &[f64],
    scores_b: &[f64],
    n_boot: usize,
    seed: u64,
) -> Result<BootstrapComparison> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::Contract(format!(
            "paired scores differ in length: {} vs {}",
            scores_a.len(),
            scores_b.len()
        )));
    }
    if scores_a.is_empty() {
        return Err(Error::Domain("empty score vectors".into()));
    }
    if n_boot < 100 {
        return Err(Error::Domain(format!(
            "n_boot {n_boot} below the minimum of 100"
        )));
    }
    if scores_a.iter().chain(scores_b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let n = scores_a.len();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_delta = mean(scores_a) - mean(scores_b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deltas = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let mut sum = 0.0;
        for _ in 0..n {
            let idx = rng.random_range(0..n);
            sum += scores_a[idx] - scores_b[idx];
        }
        deltas.push(sum / n as f64);
    }
    deltas.sort_by(|x, y| x.partial_cmp(y).expect("finite deltas"));
    Ok(BootstrapComparison {
        mean_delta,
        lower: percentile(&deltas, 0.025),
        upper: percentile(&deltas, 0.975),
    })
}

/// Linear-interpolation percentile of an ascending-sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Reads one named numeric column from a headed CSV file.
fn read_score_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let col = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| {
            Error::Format(format!(
                "{} has no column {column:?} (columns: {})",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })?;
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let cell = record.get(col).ok_or_else(|| {
            Error::Format(format!("{} row {}: short record", path.display(), i + 2))
        })?;
        let v: f64 = cell.parse().map_err(|_| {
            Error::Format(format!(
                "{} row {}: {cell:?} is not a number",
                path.display(),
                i + 2
            ))
        })?;
        values.push(v);
    }
    Ok(values)
}

fn cmd_compare(args: &CompareArgs) -> CmdResult<()> {
    let a = read_score_column(&args.a, &args.column)?;
    let b = read_score_column(&args.b, &args.column)?;
    let cmp = bootstrap_compare(&a, &b, args.boot, args.seed)?;
    println!(
        "mean_delta {} ci95 [{}, {}]",
        cmp.mean_delta, cmp.lower, cmp.upper
    );
    if let Some(out) = &args.out {
        let csv = format!(
            "mean_delta,lower,upper\n{},{},{}\n",
            cmp.mean_delta, cmp.lower, cmp.upper
        );
        atomic_write(out, csv.as_bytes())?;
    }
    Ok(())
}

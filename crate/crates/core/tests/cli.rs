//! End-to-end runs of the m3h binary: exit codes, artifact layout,
//! and reproducibility of the written files.

use std::path::{Path, PathBuf};
use std::process::Output;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_m3h")
}

fn run(args: &[&str]) -> Output {
    std::process::Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small two-modality cohort with a binary and a regression task.
const SYNTH_TOML: &str = r#"
n_patients = 24
samples_per_patient = 1
latent_dim = 3
task_correlation = 0.6
noise_scale = 0.3
seed = 11

[[modalities]]
name = "vitals"
dim = 4

[[modalities]]
name = "notes"
dim = 3

[[tasks]]
name = "mortality"
class = "binary"
prevalence = 0.5

[[tasks]]
name = "stay"
class = "regression"
"#;

const TRAIN_TOML: &str = r#"
[train]
epochs = 2
batch_sizes = [8]
learning_rates = [0.01]

[train.model]
modality_hidden = [5, 4]
shared_hidden = [5]
n_feature = 3
contrastive_proj_dim = 2
autoencoder_hidden = 4
autoencoder_latent = 2
"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        Workspace { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn arg(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }

    fn write(&self, rel: &str, text: &str) {
        std::fs::write(self.path(rel), text).expect("write");
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path(rel))
            .unwrap_or_else(|e| panic!("read {rel}: {e}"))
    }

    /// Generates the synthetic cohort into data/ and returns the
    /// manifest path.
    fn synth(&self) -> String {
        self.write("synth.toml", SYNTH_TOML);
        let out = run(&[
            "synth",
            "--config",
            &self.arg("synth.toml"),
            "--out",
            &self.arg("data"),
        ]);
        assert_eq!(code(&out), 0, "synth failed: {}", stderr(&out));
        self.arg("data/manifest.toml")
    }
}

fn exists(p: &Path) -> bool {
    p.exists()
}

#[test]
fn bogus_flag_exits_2_with_usage_text() {
    let out = run(&["--bogus"]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("Usage") || stderr(&out).contains("usage"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = run(&["transmogrify"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn help_exits_0() {
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("synth"));
}

#[test]
fn synth_writes_a_reloadable_dataset() {
    let ws = Workspace::new();
    let manifest = ws.synth();
    assert!(exists(Path::new(&manifest)));
    assert!(exists(&ws.path("data/vitals.csv")));
    assert!(exists(&ws.path("data/notes.csv")));
    assert!(exists(&ws.path("data/labels.csv")));
    let ds = m3h::data::load_dataset(Path::new(&manifest)).expect("reload");
    assert_eq!(ds.n_samples(), 24);
    assert_eq!(ds.tasks().len(), 2);
}

#[test]
fn synth_twice_same_seed_is_byte_identical() {
    let ws = Workspace::new();
    ws.write("synth.toml", SYNTH_TOML);
    for out_dir in ["a", "b"] {
        let out = run(&[
            "synth",
            "--config",
            &ws.arg("synth.toml"),
            "--out",
            &ws.arg(out_dir),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for f in ["manifest.toml", "vitals.csv", "notes.csv", "labels.csv"] {
        assert_eq!(
            ws.read(&format!("a/{f}")),
            ws.read(&format!("b/{f}")),
            "{f} differs between identical runs"
        );
    }
}

#[test]
fn missing_synth_config_exits_2() {
    let ws = Workspace::new();
    let out = run(&[
        "synth",
        "--config",
        &ws.arg("absent.toml"),
        "--out",
        &ws.arg("data"),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_the_metrics() {
    let ws = Workspace::new();
    let manifest = ws.synth();
    ws.write("exp.toml", TRAIN_TOML);
    let out = run(&[
        "train",
        "--config",
        &ws.arg("exp.toml"),
        "--data",
        &manifest,
        "--out",
        &ws.arg("fit"),
        "--seed",
        "3",
    ]);
    assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));
    assert!(exists(&ws.path("fit/model.ckpt")));
    let metrics = ws.read("fit/metrics.csv");
    assert!(metrics.starts_with("task,metric,raw,normalized,n"));
    let log = ws.read("fit/train_log.csv");
    assert!(log.starts_with("epoch,batch,term,task,value"));

    let out = run(&[
        "eval",
        "--checkpoint",
        &ws.arg("fit/model.ckpt"),
        "--data",
        &manifest,
        "--out",
        &ws.arg("scored"),
    ]);
    assert_eq!(code(&out), 0, "eval failed: {}", stderr(&out));
    assert_eq!(
        ws.read("scored/metrics.csv"),
        metrics,
        "eval metrics differ from the metrics recorded at train time"
    );
    let preds = ws.read("scored/predictions.csv");
    assert!(preds.starts_with("sample_id,task,value"));
    // one line per (supervised task, sample) plus the header
    assert_eq!(preds.lines().count(), 1 + 2 * 24);
}

#[test]
fn train_without_dataset_exits_2() {
    let ws = Workspace::new();
    ws.write("exp.toml", TRAIN_TOML);
    let out = run(&["train", "--config", &ws.arg("exp.toml"), "--out", &ws.arg("fit")]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dataset"));
}

#[test]
fn train_with_unknown_task_exits_2() {
    let ws = Workspace::new();
    let manifest = ws.synth();
    ws.write("exp.toml", TRAIN_TOML);
    let out = run(&[
        "train",
        "--config",
        &ws.arg("exp.toml"),
        "--data",
        &manifest,
        "--out",
        &ws.arg("fit"),
        "--tasks",
        "mortality,ghost",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("ghost"));
}

#[test]
fn eval_on_a_missing_checkpoint_exits_1() {
    let ws = Workspace::new();
    let manifest = ws.synth();
    let out = run(&[
        "eval",
        "--checkpoint",
        &ws.arg("absent.ckpt"),
        "--data",
        &manifest,
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn task_subset_restricts_the_fit() {
    let ws = Workspace::new();
    let manifest = ws.synth();
    ws.write("exp.toml", TRAIN_TOML);
    let out = run(&[
        "train",
        "--config",
        &ws.arg("exp.toml"),
        "--data",
        &manifest,
        "--out",
        &ws.arg("fit"),
        "--tasks",
        "mortality",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let model = m3h::model::load_checkpoint(&ws.path("fit/model.ckpt")).expect("load");
    let names: Vec<&str> = model.tasks().iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["mortality"]);
}

#[test]
fn cv_writes_the_selection_table() {
    let ws = Workspace::new();
    let manifest = ws.synth();
    // two-point grid so selection has something to choose between
    ws.write(
        "exp.toml",
        &TRAIN_TOML.replace("batch_sizes = [8]", "batch_sizes = [8, 16]"),
    );
    let out = run(&[
        "cv",
        "--config",
        &ws.arg("exp.toml"),
        "--data",
        &manifest,
        "--out",
        &ws.arg("fit"),
        "--seed",
        "5",
    ]);
    assert_eq!(code(&out), 0, "cv failed: {}", stderr(&out));
    let table = ws.read("fit/cv_table.csv");
    assert!(table.starts_with("batch_size,learning_rate,mean_normalized,selected"));
    assert_eq!(table.lines().count(), 1 + 2, "one line per grid point");
    assert_eq!(
        table.lines().filter(|l| l.ends_with(",true")).count(),
        1,
        "exactly one selected point"
    );
    assert!(exists(&ws.path("fit/model.ckpt")));
    assert!(exists(&ws.path("fit/metrics.csv")));
}

#[test]
fn tim_exports_pairs_and_heatmap_deterministically() {
    let ws = Workspace::new();
    let manifest = ws.synth();
    ws.write("exp.toml", TRAIN_TOML);
    for out_dir in ["t1", "t2"] {
        let out = run(&[
            "tim",
            "--config",
            &ws.arg("exp.toml"),
            "--data",
            &manifest,
            "--out",
            &ws.arg(out_dir),
            "--mode",
            "pairwise",
            "--seed",
            "2",
        ]);
        assert_eq!(code(&out), 0, "tim failed: {}", stderr(&out));
    }
    let pairs = ws.read("t1/tim_pairs.csv");
    assert!(pairs.starts_with("source,added,delta,mode,n_subsets,seed"));
    assert_eq!(pairs.lines().count(), 1 + 2, "one line per ordered pair");
    let heat = ws.read("t1/tim_heatmap.csv");
    assert!(heat.starts_with(",mortality,stay"));
    assert_eq!(heat.lines().count(), 1 + 2);
    assert_eq!(pairs, ws.read("t2/tim_pairs.csv"));
    assert_eq!(heat, ws.read("t2/tim_heatmap.csv"));
}

#[test]
fn tim_with_one_task_exits_2() {
    let ws = Workspace::new();
    let manifest = ws.synth();
    ws.write("exp.toml", TRAIN_TOML);
    let out = run(&[
        "tim",
        "--config",
        &ws.arg("exp.toml"),
        "--data",
        &manifest,
        "--out",
        &ws.arg("t"),
        "--tasks",
        "mortality",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn select_writes_trace_and_best() {
    let ws = Workspace::new();
    let manifest = ws.synth();
    ws.write("exp.toml", TRAIN_TOML);
    let out = run(&[
        "select",
        "--config",
        &ws.arg("exp.toml"),
        "--data",
        &manifest,
        "--out",
        &ws.arg("sel"),
        "--source",
        "mortality",
        "--beam",
        "2",
        "--seed",
        "4",
    ]);
    assert_eq!(code(&out), 0, "select failed: {}", stderr(&out));
    let best = ws.read("sel/selection_best.csv");
    assert!(best.starts_with("tasks,score"));
    let best_line = best.lines().nth(1).expect("best line");
    assert!(best_line.contains("mortality"), "best set keeps the source");
    let trace = ws.read("sel/selection_trace.csv");
    assert!(trace.starts_with("round,rank,tasks,score"));
}

#[test]
fn select_with_unknown_source_exits_2() {
    let ws = Workspace::new();
    let manifest = ws.synth();
    ws.write("exp.toml", TRAIN_TOML);
    let out = run(&[
        "select",
        "--config",
        &ws.arg("exp.toml"),
        "--data",
        &manifest,
        "--out",
        &ws.arg("sel"),
        "--source",
        "ghost",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("ghost"));
}

#[test]
fn gradcheck_passes_and_prints_per_point_errors() {
    let out = run(&["gradcheck", "--points", "2", "--seed", "0"]);
    assert_eq!(code(&out), 0, "gradcheck failed: {}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("point 0:"));
    assert!(text.contains("point 1:"));
    assert!(text.contains("gradcheck passed"));
}

#[test]
fn compare_reports_a_positive_interval_under_dominance() {
    let ws = Workspace::new();
    let mut a = String::from("score\n");
    let mut b = String::from("score\n");
    for i in 0..30 {
        let base = 0.4 + 0.01 * i as f64;
        a.push_str(&format!("{}\n", base + 0.08));
        b.push_str(&format!("{base}\n"));
    }
    ws.write("a.csv", &a);
    ws.write("b.csv", &b);
    let out = run(&[
        "compare",
        "--a",
        &ws.arg("a.csv"),
        "--b",
        &ws.arg("b.csv"),
        "--boot",
        "500",
        "--seed",
        "7",
        "--out",
        &ws.arg("cmp.csv"),
    ]);
    assert_eq!(code(&out), 0, "compare failed: {}", stderr(&out));
    let csv = ws.read("cmp.csv");
    assert!(csv.starts_with("mean_delta,lower,upper"));
    let fields: Vec<f64> = csv
        .lines()
        .nth(1)
        .expect("data line")
        .split(',')
        .map(|v| v.parse().expect("number"))
        .collect();
    let (mean_delta, lower, upper) = (fields[0], fields[1], fields[2]);
    assert!((mean_delta - 0.08).abs() < 1e-12);
    assert!(lower > 0.0);
    assert!(upper >= lower);
}

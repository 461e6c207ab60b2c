//! Task interaction scores: how much joint training with an added
//! task changes a source task's performance, averaged over the
//! subsets of tasks co-trained alongside the pair, plus a beam search
//! that grows a source task's best training companions.

pub mod oracle;

pub use oracle::{
    restrict_to_tasks, task_set, CachedOracle, LookupOracle, PerformanceOracle, PipelineOracle,
};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seeding::derive_seed;
use oracle::names_of;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

/// Exact enumeration runs 2^(M-2) subset evaluations; beyond this
/// many tasks the sampled estimator is the only tractable route.
pub const EXACT_ENUMERATION_LIMIT: usize = 12;

pub const DEFAULT_BEAM_WIDTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimMode {
    Exact,
    Pairwise,
    Sampled,
}

impl TimMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TimMode::Exact => "exact",
            TimMode::Pairwise => "pairwise",
            TimMode::Sampled => "sampled",
        }
    }
}

impl fmt::Display for TimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(TimMode::Exact),
            "pairwise" => Ok(TimMode::Pairwise),
            "sampled" => Ok(TimMode::Sampled),
            other => Err(Error::Format(format!(
                "unknown interaction mode {other:?}, expected exact, pairwise or sampled"
            ))),
        }
    }
}

/// One interaction score: the effect of jointly learning `added` on
/// the performance of `source`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimResult {
    pub source: String,
    pub added: String,
    pub delta: f64,
    pub mode: TimMode,
    pub n_subsets_used: usize,
    /// Present only for the sampled estimator.
    pub seed: Option<u64>,
}

/// How matrix entries are estimated; `Sampled` carries its own draw
/// budget and base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum TimEstimator {
    Exact,
    Pairwise,
    Sampled { n_samples: usize, seed: u64 },
}

impl TimEstimator {
    pub fn mode(&self) -> TimMode {
        match self {
            TimEstimator::Exact => TimMode::Exact,
            TimEstimator::Pairwise => TimMode::Pairwise,
            TimEstimator::Sampled { .. } => TimMode::Sampled,
        }
    }
}

fn check_tasks_unique(tasks: &[String]) -> Result<()> {
    let set: BTreeSet<&String> = tasks.iter().collect();
    if set.len() != tasks.len() {
        return Err(Error::Contract("duplicate task names".into()));
    }
    Ok(())
}

fn check_pair(source: &str, added: &str, all_tasks: &[String]) -> Result<()> {
    if source == added {
        return Err(Error::Domain(format!(
            "source and added task must differ (both {source})"
        )));
    }
    check_tasks_unique(all_tasks)?;
    for t in [source, added] {
        if !all_tasks.iter().any(|n| n == t) {
            return Err(Error::Domain(format!("task {t} is not in the task list")));
        }
    }
    Ok(())
}

/// The tasks co-trained alongside the pair: everything except
/// `source` and `added`.
fn rest_of<'a>(all_tasks: &'a [String], source: &str, added: &str) -> Vec<&'a String> {
    all_tasks
        .iter()
        .filter(|t| *t != source && *t != added)
        .collect()
}

fn bracketed_difference(
    oracle: &dyn PerformanceOracle,
    source: &str,
    added: &str,
    subset: &BTreeSet<String>,
) -> Result<f64> {
    let mut with_source = subset.clone();
    with_source.insert(source.to_string());
    let mut with_both = with_source.clone();
    with_both.insert(added.to_string());
    Ok(oracle.score(&with_both, source)? - oracle.score(&with_source, source)?)
}

/// Exact interaction score: the average over every subset S of the
/// remaining tasks of (score of `source` trained with S+source+added)
/// minus (score of `source` trained with S+source).
pub fn tim_exact(
    oracle: &dyn PerformanceOracle,
    source: &str,
    added: &str,
    all_tasks: &[String],
) -> Result<TimResult> {
    check_pair(source, added, all_tasks)?;
    let m = all_tasks.len();
    if m > EXACT_ENUMERATION_LIMIT {
        return Err(Error::Capacity(format!(
            "exact enumeration over {m} tasks needs 2^{} oracle evaluations; \
             use the sampled estimator",
            m - 2
        )));
    }
    let rest = rest_of(all_tasks, source, added);
    let n_subsets = 1usize << rest.len();
    let mut sum = 0.0;
    for mask in 0..n_subsets {
        let subset: BTreeSet<String> = rest
            .iter()
            .enumerate()
            .filter(|(b, _)| mask >> b & 1 == 1)
            .map(|(_, t)| (*t).clone())
            .collect();
        sum += bracketed_difference(oracle, source, added, &subset)?;
    }
    Ok(TimResult {
        source: source.to_string(),
        added: added.to_string(),
        delta: sum / n_subsets as f64,
        mode: TimMode::Exact,
        n_subsets_used: n_subsets,
        seed: None,
    })
}

/// Size-two restriction: the pair trained alone against the source
/// trained alone.
pub fn tim_pairwise(
    oracle: &dyn PerformanceOracle,
    source: &str,
    added: &str,
) -> Result<TimResult> {
    if source == added {
        return Err(Error::Domain(format!(
            "source and added task must differ (both {source})"
        )));
    }
    let delta = bracketed_difference(oracle, source, added, &BTreeSet::new())?;
    Ok(TimResult {
        source: source.to_string(),
        added: added.to_string(),
        delta,
        mode: TimMode::Pairwise,
        n_subsets_used: 1,
        seed: None,
    })
}

/// Unbiased Monte Carlo estimate of [`tim_exact`]: subsets drawn
/// uniformly (each remaining task in or out by fair coin) with
/// replacement. Repeated draws reuse memoized oracle scores.
pub fn tim_sampled(
    oracle: &dyn PerformanceOracle,
    source: &str,
    added: &str,
    all_tasks: &[String],
    n_samples: usize,
    seed: u64,
) -> Result<TimResult> {
    check_pair(source, added, all_tasks)?;
    if n_samples == 0 {
        return Err(Error::Domain("n_samples must be >= 1".into()));
    }
    let rest = rest_of(all_tasks, source, added);
    let cached = CachedOracle::new(oracle);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..n_samples {
        let subset: BTreeSet<String> = rest
            .iter()
            .filter(|_| rng.random::<bool>())
            .map(|t| (*t).clone())
            .collect();
        sum += bracketed_difference(&cached, source, added, &subset)?;
    }
    Ok(TimResult {
        source: source.to_string(),
        added: added.to_string(),
        delta: sum / n_samples as f64,
        mode: TimMode::Sampled,
        n_subsets_used: n_samples,
        seed: Some(seed),
    })
}

/// Interaction scores for every ordered task pair, row-major in task
/// declaration order. Oracle evaluations are memoized across all
/// pairs. In sampled mode each pair draws from its own derived seed.
pub fn tim_pairs(
    oracle: &dyn PerformanceOracle,
    tasks: &[String],
    estimator: &TimEstimator,
) -> Result<Vec<TimResult>> {
    check_tasks_unique(tasks)?;
    if tasks.len() < 2 {
        return Err(Error::Domain(format!(
            "interaction scores need at least 2 tasks, got {}",
            tasks.len()
        )));
    }
    let cached = CachedOracle::new(oracle);
    let mut results = Vec::with_capacity(tasks.len() * (tasks.len() - 1));
    for source in tasks {
        for added in tasks {
            if source == added {
                continue;
            }
            let result = match estimator {
                TimEstimator::Exact => tim_exact(&cached, source, added, tasks),
                TimEstimator::Pairwise => tim_pairwise(&cached, source, added),
                TimEstimator::Sampled { n_samples, seed } => tim_sampled(
                    &cached,
                    source,
                    added,
                    tasks,
                    *n_samples,
                    derive_seed(*seed, &format!("tim.{source}.{added}")),
                ),
            }
            .map_err(|e| e.context(&format!("pair ({source}, {added})")))?;
            results.push(result);
        }
    }
    Ok(results)
}

/// All pairwise interaction scores as one M x M matrix in task
/// declaration order: row = source, column = added, diagonal 0.
pub fn tim_matrix(
    oracle: &dyn PerformanceOracle,
    tasks: &[String],
    estimator: &TimEstimator,
) -> Result<Matrix> {
    let results = tim_pairs(oracle, tasks, estimator)?;
    pairs_to_matrix(tasks, &results)
}

/// Arranges per-pair results into an M x M matrix in task declaration
/// order: row = source, column = added, diagonal 0.
pub fn pairs_to_matrix(tasks: &[String], results: &[TimResult]) -> Result<Matrix> {
    let index_of = |name: &str| {
        tasks
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::Contract(format!("result names unknown task {name}")))
    };
    let mut out = Matrix::zeros(tasks.len(), tasks.len());
    for r in results {
        out.set(index_of(&r.source)?, index_of(&r.added)?, r.delta);
    }
    Ok(out)
}

/// CSV export of interaction results:
/// `source,added,delta,mode,n_subsets,seed` (seed empty unless
/// sampled).
pub fn tim_csv(results: &[TimResult]) -> String {
    let mut out = String::from("source,added,delta,mode,n_subsets,seed\n");
    for r in results {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.source, r.added, r.delta, r.mode, r.n_subsets_used, seed
        ));
    }
    out
}

/// Heatmap CSV: task names as header row and leading column, sources
/// down the rows, added tasks across the columns.
pub fn heatmap_csv(tasks: &[String], deltas: &Matrix) -> Result<String> {
    if deltas.rows() != tasks.len() || deltas.cols() != tasks.len() {
        return Err(Error::Dimension(format!(
            "heatmap for {} tasks given a {}x{} matrix",
            tasks.len(),
            deltas.rows(),
            deltas.cols()
        )));
    }
    let mut out = String::new();
    out.push_str(&format!(",{}\n", tasks.join(",")));
    for (row, source) in tasks.iter().enumerate() {
        let cells: Vec<String> = (0..tasks.len())
            .map(|col| format!("{}", deltas.get(row, col)))
            .collect();
        out.push_str(&format!("{},{}\n", source, cells.join(",")));
    }
    Ok(out)
}

/// One candidate task set scored during the beam search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    /// Sorted task names.
    pub tasks: Vec<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyResult {
    /// Sorted task names of the best set found.
    pub best: Vec<String>,
    pub best_score: f64,
    /// Every expansion scored per round, ranked best first.
    pub rounds: Vec<Vec<ScoredSet>>,
}

fn finite_score(oracle: &dyn PerformanceOracle, set: &BTreeSet<String>, measured: &str) -> Result<f64> {
    let v = oracle.score(set, measured)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "oracle returned non-finite score {v} for {{{}}}",
            names_of(set).join(", ")
        )));
    }
    Ok(v)
}

/// Beam search for the training companions that most improve
/// `source`. Each round expands every beam member with every unused
/// candidate, keeps the global top `beam_width` sets, and stops when
/// a round fails to beat the incumbent best. Score ties rank the
/// lexicographically smaller task-name set first.
pub fn greedy_select(
    oracle: &dyn PerformanceOracle,
    source: &str,
    candidates: &[String],
    beam_width: usize,
) -> Result<GreedyResult> {
    if beam_width == 0 {
        return Err(Error::Domain("beam width must be >= 1".into()));
    }
    check_tasks_unique(candidates)?;
    if candidates.iter().any(|c| c == source) {
        return Err(Error::Domain(format!(
            "source task {source} cannot also be a candidate"
        )));
    }
    let cached = CachedOracle::new(oracle);
    let base: BTreeSet<String> = [source.to_string()].into();
    let mut best_score = finite_score(&cached, &base, source)?;
    let mut best_set = base.clone();
    let mut beam = vec![base];
    let mut rounds = Vec::new();
    loop {
        let children: BTreeSet<BTreeSet<String>> = beam
            .iter()
            .flat_map(|member| {
                candidates.iter().filter(|c| !member.contains(*c)).map(|c| {
                    let mut child = member.clone();
                    child.insert(c.clone());
                    child
                })
            })
            .collect();
        if children.is_empty() {
            break;
        }
        let mut scored = Vec::with_capacity(children.len());
        for child in children {
            let score = finite_score(&cached, &child, source)?;
            scored.push((child, score));
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        rounds.push(
            scored
                .iter()
                .map(|(s, v)| ScoredSet {
                    tasks: names_of(s),
                    score: *v,
                })
                .collect(),
        );
        if scored[0].1 <= best_score {
            break;
        }
        best_set = scored[0].0.clone();
        best_score = scored[0].1;
        beam = scored
            .into_iter()
            .take(beam_width)
            .map(|(s, _)| s)
            .collect();
    }
    Ok(GreedyResult {
        best: names_of(&best_set),
        best_score,
        rounds,
    })
}

//! Factorial influence analysis over synthetic-category subsets.
//!
//! For `k` categories the grid has `2^k` runs, one per subset. The influence
//! of category `c` on a metric is the mean metric over runs that include `c`
//! minus the mean over runs that exclude it, tested with a two-sample t-test.
//! Metric values are taken in points (score × 100).

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::embedder::EmbedderParams;
use crate::eval::{evaluate_suite, EvalTask, ScoreTable, TaskCategory};
use crate::model::{Category, Dataset};
use crate::trainer::{train, TrainConfig};

/// Default significance level, strict `p < alpha`.
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const MAX_FACTORS: usize = 6;

#[derive(Debug, Error)]
pub enum InfluenceError {
    #[error("category `{0}` listed twice")]
    DuplicateCategory(Category),
    #[error("need between 1 and {MAX_FACTORS} categories, got {0}")]
    FactorCount(usize),
    #[error("t-test needs at least 2 values per group (got {0} and {1})")]
    GroupTooSmall(usize, usize),
    #[error("no successful run {side} category `{category}` for metric `{metric}`")]
    EmptyGroup {
        category: Category,
        metric: String,
        side: &'static str,
    },
    #[error("metric `{0}` missing from a run's score table")]
    MissingMetric(String),
    #[error("no dataset for category `{0}`")]
    MissingData(Category),
    #[error("base dataset is empty and the grid contains the empty subset")]
    EmptyBase,
    #[error("every grid run failed")]
    AllRunsFailed,
    #[error("registry {path}: {reason}")]
    Registry { path: PathBuf, reason: String },
}

fn registry_err(path: &Path, reason: impl ToString) -> InfluenceError {
    InfluenceError::Registry {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// One subset of the analysed categories. Bit `j` of `mask` includes the
/// `j`-th category of the canonical (sorted) factor list.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubsetId {
    pub mask: u32,
    pub included: Vec<Category>,
}

impl SubsetId {
    pub fn contains(&self, category: Category) -> bool {
        self.included.contains(&category)
    }

    /// File-safe stable key, e.g. `subset-05`.
    pub fn key(&self) -> String {
        format!("subset-{:02}", self.mask)
    }

    /// `base` for the empty subset, otherwise the category names joined by `+`.
    pub fn label(&self) -> String {
        if self.included.is_empty() {
            "base".to_string()
        } else {
            self.included.iter().map(|c| c.as_str()).collect::<Vec<_>>().join("+")
        }
    }
}

/// Sorts and checks a factor list into its canonical order.
pub fn canonical_factors(categories: &[Category]) -> Result<Vec<Category>, InfluenceError> {
    if categories.is_empty() || categories.len() > MAX_FACTORS {
        return Err(InfluenceError::FactorCount(categories.len()));
    }
    let mut sorted = categories.to_vec();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(InfluenceError::DuplicateCategory(w[0]));
    }
    Ok(sorted)
}

/// All `2^k` subsets, in binary-counting order over the sorted categories.
pub fn enumerate_subsets(categories: &[Category]) -> Result<Vec<SubsetId>, InfluenceError> {
    let factors = canonical_factors(categories)?;
    Ok((0..1u32 << factors.len())
        .map(|mask| SubsetId {
            mask,
            included: factors
                .iter()
                .enumerate()
                .filter(|(j, _)| mask >> j & 1 == 1)
                .map(|(_, c)| *c)
                .collect(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRun {
    pub subset: SubsetId,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<ScoreTable>,
    /// Relative to the registry directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Hash of everything the run depends on; a mismatch forces a rerun.
    pub input_fingerprint: String,
}

impl ExperimentRun {
    pub fn is_done(&self) -> bool {
        self.status == RunStatus::Done && self.scores.is_some()
    }
}

/// What an influence estimate is measured on.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    /// Mean over the tasks of one evaluation category.
    CategoryMean(TaskCategory),
    Task(String),
    Overall,
}

impl Metric {
    pub fn name(&self) -> String {
        match self {
            Metric::CategoryMean(c) => c.as_str().to_string(),
            Metric::Task(id) => id.clone(),
            Metric::Overall => "overall".to_string(),
        }
    }

    /// The metric in points, if present in `scores`.
    pub fn points(&self, scores: &ScoreTable) -> Option<f64> {
        let raw = match self {
            Metric::CategoryMean(c) => scores.per_category.get(c).copied(),
            Metric::Task(id) => scores.per_task.get(id).copied(),
            Metric::Overall => Some(scores.overall),
        };
        raw.map(|v| v * 100.0)
    }
}

/// Category-mean metrics present in `tasks`, in category order.
pub fn category_metrics(tasks: &[EvalTask]) -> Vec<Metric> {
    TaskCategory::ALL
        .into_iter()
        .filter(|c| tasks.iter().any(|t| t.category() == *c))
        .map(Metric::CategoryMean)
        .collect()
}

/// Per-task metrics, sorted by task id.
pub fn task_metrics(tasks: &[EvalTask]) -> Vec<Metric> {
    let mut ids: Vec<&str> = tasks.iter().map(|t| t.id.as_str()).collect();
    ids.sort_unstable();
    ids.into_iter().map(|id| Metric::Task(id.to_string())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TTestKind {
    /// Pooled variance, `df = n_a + n_b − 2`.
    #[default]
    Student,
    /// Unequal variances with Welch–Satterthwaite degrees of freedom.
    Welch,
}

/// Why a t statistic fell back to a convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Degeneracy {
    /// Zero variance in both groups and equal means: `t = 0`, `p = 1`.
    ConstantEqual,
    /// Zero variance in both groups, different means: `t = ±∞`, `p = 0`.
    ConstantUnequal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t_stat: f64,
    pub p_value: f64,
    pub df: f64,
    pub degenerate: Option<Degeneracy>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64], m: f64) -> f64 {
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Two-sided two-sample Student t-test with pooled variance.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<TTest, InfluenceError> {
    t_test_with(a, b, TTestKind::Student)
}

pub fn t_test_with(a: &[f64], b: &[f64], kind: TTestKind) -> Result<TTest, InfluenceError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(InfluenceError::GroupTooSmall(a.len(), b.len()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_variance(a, ma), sample_variance(b, mb));
    let (se2, df) = match kind {
        TTestKind::Student => {
            let df = na + nb - 2.0;
            let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            (pooled * (1.0 / na + 1.0 / nb), df)
        }
        TTestKind::Welch => {
            let (qa, qb) = (va / na, vb / nb);
            let se2 = qa + qb;
            let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
            (se2, df)
        }
    };
    if se2 == 0.0 {
        let fallback = if ma == mb {
            (0.0, 1.0, Degeneracy::ConstantEqual)
        } else {
            ((ma - mb).signum() * f64::INFINITY, 0.0, Degeneracy::ConstantUnequal)
        };
        return Ok(TTest {
            t_stat: fallback.0,
            p_value: fallback.1,
            df: na + nb - 2.0,
            degenerate: Some(fallback.2),
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(TTest {
        t_stat: t,
        p_value: p,
        df,
        degenerate: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEstimate {
    pub category: Category,
    pub metric: String,
    /// Mean with the category minus mean without it, in points.
    pub influence: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub significant: bool,
    pub n_plus: usize,
    pub n_minus: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<Degeneracy>,
}

/// Influence estimate from the two groups of metric values directly.
pub fn estimate_from_groups(
    category: Category,
    metric: &str,
    plus: &[f64],
    minus: &[f64],
    alpha: f64,
    kind: TTestKind,
) -> Result<InfluenceEstimate, InfluenceError> {
    for (side, group) in [("including", plus), ("excluding", minus)] {
        if group.is_empty() {
            return Err(InfluenceError::EmptyGroup {
                category,
                metric: metric.to_string(),
                side,
            });
        }
    }
    let test = t_test_with(plus, minus, kind)?;
    Ok(InfluenceEstimate {
        category,
        metric: metric.to_string(),
        influence: mean(plus) - mean(minus),
        t_stat: test.t_stat,
        p_value: test.p_value,
        significant: test.p_value < alpha,
        n_plus: plus.len(),
        n_minus: minus.len(),
        degenerate: test.degenerate,
    })
}

/// Splits metric values (in points) of successful runs by inclusion of `category`.
pub fn partition(
    runs: &[ExperimentRun],
    category: Category,
    metric: &Metric,
) -> Result<(Vec<f64>, Vec<f64>), InfluenceError> {
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    for run in runs.iter().filter(|r| r.is_done()) {
        let scores = run.scores.as_ref().expect("done runs carry scores");
        let v = metric.points(scores).ok_or_else(|| InfluenceError::MissingMetric(metric.name()))?;
        if run.subset.contains(category) {
            plus.push(v);
        } else {
            minus.push(v);
        }
    }
    Ok((plus, minus))
}

/// Influence of `category` on `metric` across the grid `runs`; failed runs are skipped.
pub fn influence(
    runs: &[ExperimentRun],
    category: Category,
    metric: &Metric,
    alpha: f64,
) -> Result<InfluenceEstimate, InfluenceError> {
    influence_with(runs, category, metric, alpha, TTestKind::Student)
}

pub fn influence_with(
    runs: &[ExperimentRun],
    category: Category,
    metric: &Metric,
    alpha: f64,
    kind: TTestKind,
) -> Result<InfluenceEstimate, InfluenceError> {
    let (plus, minus) = partition(runs, category, metric)?;
    estimate_from_groups(category, &metric.name(), &plus, &minus, alpha, kind)
}

/// Estimates for every (category, metric) cell; rows follow `categories`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    pub categories: Vec<Category>,
    pub metrics: Vec<String>,
    pub cells: Vec<Vec<InfluenceEstimate>>,
}

impl InfluenceMatrix {
    pub fn compute(
        runs: &[ExperimentRun],
        categories: &[Category],
        metrics: &[Metric],
        alpha: f64,
        kind: TTestKind,
    ) -> Result<Self, InfluenceError> {
        let cells = categories
            .iter()
            .map(|&c| metrics.iter().map(|m| influence_with(runs, c, m, alpha, kind)).collect())
            .collect::<Result<Vec<Vec<_>>, _>>()?;
        Ok(InfluenceMatrix {
            categories: categories.to_vec(),
            metrics: metrics.iter().map(Metric::name).collect(),
            cells,
        })
    }

    pub fn influences(&self) -> Vec<Vec<f64>> {
        self.cells.iter().map(|row| row.iter().map(|e| e.influence).collect()).collect()
    }

    pub fn p_values(&self) -> Vec<Vec<f64>> {
        self.cells.iter().map(|row| row.iter().map(|e| e.p_value).collect()).collect()
    }

    fn grid_csv(&self, value: impl Fn(&InfluenceEstimate) -> f64) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["category".to_string()];
        header.extend(self.metrics.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (c, row) in self.categories.iter().zip(&self.cells) {
            let mut rec = vec![c.as_str().to_string()];
            rec.extend(row.iter().map(|e| format!("{:.6}", value(e))));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    /// Rows = training categories, columns = metrics, cells = influence in points.
    pub fn influence_csv(&self) -> String {
        self.grid_csv(|e| e.influence)
    }

    pub fn pvalues_csv(&self) -> String {
        self.grid_csv(|e| e.p_value)
    }

    /// Long form: one row per cell with every estimate field.
    pub fn estimates_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "category",
            "metric",
            "influence",
            "t_stat",
            "p_value",
            "significant",
            "n_plus",
            "n_minus",
            "degenerate",
        ])
        .expect("in-memory write");
        for e in self.cells.iter().flatten() {
            let degenerate = match e.degenerate {
                None => "",
                Some(Degeneracy::ConstantEqual) => "constant-equal",
                Some(Degeneracy::ConstantUnequal) => "constant-unequal",
            };
            w.write_record([
                e.category.as_str().to_string(),
                e.metric.clone(),
                format!("{:.6}", e.influence),
                format!("{:.6}", e.t_stat),
                format!("{:.6}", e.p_value),
                e.significant.to_string(),
                e.n_plus.to_string(),
                e.n_minus.to_string(),
                degenerate.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<Vec<f64>>,
    /// Every input was zero; values are returned unchanged.
    pub all_zero: bool,
}

/// Divides every cell by the matrix-wide maximum absolute value.
pub fn normalize_matrix(values: &[Vec<f64>]) -> Normalized {
    let max = values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Normalized {
            values: values.to_vec(),
            all_zero: true,
        };
    }
    Normalized {
        values: values.iter().map(|row| row.iter().map(|v| v / max).collect()).collect(),
        all_zero: false,
    }
}

/// `true` where `p < alpha`, strictly.
pub fn significance_mask(p_values: &[Vec<f64>], alpha: f64) -> Vec<Vec<bool>> {
    p_values.iter().map(|row| row.iter().map(|&p| p < alpha).collect()).collect()
}

/// Inputs shared by every run of a grid.
#[derive(Debug, Clone, Copy)]
pub struct GridInputs<'a> {
    pub data_by_category: &'a BTreeMap<Category, Dataset>,
    pub base: &'a Dataset,
    pub base_params: &'a EmbedderParams,
    pub train: &'a TrainConfig,
    pub tasks: &'a [EvalTask],
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryManifest {
    format_version: u32,
    seed: u64,
    tasks: Vec<String>,
    runs: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    key: String,
    subset: String,
    status: Option<RunStatus>,
}

/// A run registry directory, held under an exclusive advisory lock.
///
/// Layout: `manifest.json`, `runs/<key>.json`, `checkpoints/<key>.json`.
#[derive(Debug)]
pub struct Registry {
    dir: PathBuf,
    manifest: File,
}

impl Registry {
    /// Opens (creating if needed) and locks the registry at `dir`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, InfluenceError> {
        let dir = dir.as_ref().to_path_buf();
        for sub in ["runs", "checkpoints"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| registry_err(&dir, e))?;
        }
        let path = dir.join("manifest.json");
        let manifest = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .map_err(|e| registry_err(&path, e))?;
        manifest
            .try_lock()
            .map_err(|e| registry_err(&path, format!("registry is locked by another writer ({e})")))?;
        Ok(Registry { dir, manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn run_path(&self, subset: &SubsetId) -> PathBuf {
        self.dir.join("runs").join(format!("{}.json", subset.key()))
    }

    fn checkpoint_rel(subset: &SubsetId) -> String {
        format!("checkpoints/{}.json", subset.key())
    }

    /// Reads the stored record for `subset`, if any parses.
    pub fn load_run(&self, subset: &SubsetId) -> Option<ExperimentRun> {
        let text = fs::read_to_string(self.run_path(subset)).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn store_run(&self, run: &ExperimentRun) -> Result<(), InfluenceError> {
        let path = self.run_path(&run.subset);
        let tmp = path.with_extension("json.tmp");
        let json = serde_json::to_string_pretty(run).expect("run serialization is infallible");
        fs::write(&tmp, json + "\n").map_err(|e| registry_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| registry_err(&path, e))
    }

    fn write_manifest(&mut self, seed: u64, tasks: &[EvalTask], runs: &[(SubsetId, Option<RunStatus>)]) -> Result<(), InfluenceError> {
        let mut task_ids: Vec<String> = tasks.iter().map(|t| t.id.clone()).collect();
        task_ids.sort();
        let m = RegistryManifest {
            format_version: 1,
            seed,
            tasks: task_ids,
            runs: runs
                .iter()
                .map(|(s, status)| ManifestEntry {
                    key: s.key(),
                    subset: s.label(),
                    status: *status,
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&m).expect("manifest serialization is infallible") + "\n";
        let path = self.dir.join("manifest.json");
        let f = &mut self.manifest;
        f.set_len(0).map_err(|e| registry_err(&path, e))?;
        f.seek(SeekFrom::Start(0)).map_err(|e| registry_err(&path, e))?;
        f.write_all(json.as_bytes()).map_err(|e| registry_err(&path, e))?;
        f.flush().map_err(|e| registry_err(&path, e))
    }
}

fn subset_dataset(inputs: &GridInputs<'_>, subset: &SubsetId) -> Result<Dataset, InfluenceError> {
    let mut data = inputs.base.clone();
    for c in &subset.included {
        data.extend(inputs.data_by_category.get(c).ok_or(InfluenceError::MissingData(*c))?);
    }
    Ok(data)
}

fn input_fingerprint(inputs: &GridInputs<'_>, data: &Dataset) -> String {
    let mut h = xxhash_rust::xxh3::Xxh3::new();
    h.update(&inputs.base_params.fingerprint().to_le_bytes());
    h.update(serde_json::to_string(inputs.train).expect("config serializes").as_bytes());
    for ex in data {
        h.update(serde_json::to_string(ex).expect("example serializes").as_bytes());
        h.update(b"\n");
    }
    for t in inputs.tasks {
        h.update(serde_json::to_string(t).expect("task serializes").as_bytes());
    }
    format!("{:016x}", h.digest())
}

fn execute_run(inputs: &GridInputs<'_>, registry: &Registry, subset: &SubsetId) -> Result<ExperimentRun, InfluenceError> {
    let data = subset_dataset(inputs, subset)?;
    let fingerprint = input_fingerprint(inputs, &data);
    if let Some(prev) = registry.load_run(subset) {
        let checkpoint_ok = prev
            .checkpoint_path
            .as_ref()
            .is_some_and(|p| registry.dir.join(p).is_file());
        if prev.is_done() && checkpoint_ok && prev.input_fingerprint == fingerprint {
            log::info!("{}: reusing stored run", subset.key());
            return Ok(prev);
        }
    }
    let failed = |error: String| ExperimentRun {
        subset: subset.clone(),
        seed: inputs.train.seed,
        status: RunStatus::Failed,
        scores: None,
        checkpoint_path: None,
        final_loss: None,
        error: Some(error),
        input_fingerprint: fingerprint.clone(),
    };
    log::info!("{}: training on {} examples ({})", subset.key(), data.len(), subset.label());
    let run = match train(&data, inputs.base_params, inputs.train) {
        Err(e) => failed(e.to_string()),
        Ok(report) => match evaluate_suite(&report.final_params, inputs.tasks) {
            Err(e) => failed(e.to_string()),
            Ok(scores) => {
                let rel = Registry::checkpoint_rel(subset);
                report
                    .final_params
                    .save(registry.dir.join(&rel))
                    .map_err(|e| registry_err(&registry.dir.join(&rel), e))?;
                ExperimentRun {
                    subset: subset.clone(),
                    seed: inputs.train.seed,
                    status: RunStatus::Done,
                    scores: Some(scores),
                    checkpoint_path: Some(rel),
                    final_loss: Some(report.final_loss()),
                    error: None,
                    input_fingerprint: fingerprint.clone(),
                }
            }
        },
    };
    if let Some(e) = &run.error {
        log::warn!("{}: run failed: {e}", subset.key());
    }
    registry.store_run(&run)?;
    Ok(run)
}

/// Trains and evaluates one model per subset, `jobs` at a time.
///
/// Records are persisted as each run finishes; a run whose stored record is
/// complete and matches the current inputs is reused instead of recomputed.
/// Failed runs are recorded and returned; only a grid with no success errors.
pub fn run_grid(
    inputs: &GridInputs<'_>,
    subsets: &[SubsetId],
    registry: &mut Registry,
    jobs: usize,
) -> Result<Vec<ExperimentRun>, InfluenceError> {
    for s in subsets {
        if s.included.is_empty() && inputs.base.is_empty() {
            return Err(InfluenceError::EmptyBase);
        }
        if let Some(c) = s.included.iter().find(|c| !inputs.data_by_category.contains_key(c)) {
            return Err(InfluenceError::MissingData(*c));
        }
    }
    let pending: Vec<(SubsetId, Option<RunStatus>)> = subsets.iter().map(|s| (s.clone(), None)).collect();
    registry.write_manifest(inputs.train.seed, inputs.tasks, &pending)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ExperimentRun, InfluenceError>>>> =
        Mutex::new((0..subsets.len()).map(|_| None).collect());
    let shared: &Registry = registry;
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, subsets.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= subsets.len() {
                    break;
                }
                let r = execute_run(inputs, shared, &subsets[i]);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let runs = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every subset was processed"))
        .collect::<Result<Vec<_>, _>>()?;

    let statuses: Vec<(SubsetId, Option<RunStatus>)> =
        runs.iter().map(|r| (r.subset.clone(), Some(r.status))).collect();
    registry.write_manifest(inputs.train.seed, inputs.tasks, &statuses)?;
    if runs.iter().all(|r| !r.is_done()) {
        return Err(InfluenceError::AllRunsFailed);
    }
    Ok(runs)
}

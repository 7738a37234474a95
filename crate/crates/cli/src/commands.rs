//! One function per subcommand. Each reads the manifest's output layout:
//!
//! ```text
//! <output_dir>/
//!   data/<category>.jsonl      generate, import
//!   generation/{composition.csv, tasks.jsonl, stats.json}
//!   model/{checkpoint.json, train_report.json}
//!   eval/{scores.json, scores.csv}
//!   registry/                  one trained run per subset
//!   influence/{influence,pvalues}{,_tasks}.csv, estimates.csv, *.svg
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use synthembed::embedder::EmbedderParams;
use synthembed::eval::{evaluate_suite, EvalTask, ScoreTable};
use synthembed::fixtures;
use synthembed::gateway::{Gateway, GatewayConfig, MockResponse, MockServer, Secret};
use synthembed::import::{import_published, ImportReport};
use synthembed::influence::{
    category_metrics, enumerate_subsets, run_grid, task_metrics, ExperimentRun, GridInputs, InfluenceMatrix,
    Metric, Registry, TTestKind,
};
use synthembed::model::{read_jsonl, write_jsonl, Category, Dataset};
use synthembed::report::render_influence;
use synthembed::synth::{run_generation, CompositionReport, GenerationSpec, TemplateSet};
use synthembed::trainer::train as train_model;

use crate::error::CliError;
use crate::manifest::{ExperimentManifest, ModelSection};

/// Environment variable naming a published corpus for `import`.
pub const PUBLISHED_DATA_ENV: &str = "SYNTHEMBED_PUBLISHED_DATA";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::file(path, e))
}

fn to_json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

/// Keeps a mock server alive for as long as the gateway talks to it.
struct Backend {
    gateway: Gateway,
    _server: Option<MockServer>,
}

fn backend(m: &ExperimentManifest) -> Result<Backend, CliError> {
    let mut config: GatewayConfig = m.gateway.config.clone();
    config.jitter_seed = m.seed;
    let server = match m.gateway.mock.as_deref() {
        None => None,
        Some("planted") => Some(
            MockServer::with_responder(fixtures::planted_responder(m.gateway.mock_malformed_rate))
                .map_err(|e| CliError::Env(e.to_string()))?,
        ),
        Some(script) => {
            let path = Path::new(script);
            let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
            let responses: Vec<MockResponse> =
                serde_json::from_str(&text).map_err(|e| CliError::file(path, format!("mock script: {e}")))?;
            Some(MockServer::start(responses).map_err(|e| CliError::Env(e.to_string()))?)
        }
    };
    match &server {
        Some(s) => {
            config.base_url = s.base_url();
            config.api_key = Secret::new("mock");
        }
        None => config = config.with_env_key(),
    }
    Ok(Backend {
        gateway: Gateway::new(config)?,
        _server: server,
    })
}

fn templates(m: &ExperimentManifest) -> Result<TemplateSet, CliError> {
    match m.template_dir() {
        Some(dir) => Ok(TemplateSet::load_dir(dir)?),
        None => TemplateSet::builtin(&m.templates)
            .ok_or_else(|| CliError::invariant(format!("no built-in template set `{}`", m.templates))),
    }
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub report: CompositionReport,
    pub files: Vec<PathBuf>,
}

/// Generates every `[[generation]]` spec and writes one JSONL file per category.
pub fn generate(m: &ExperimentManifest, jobs: Option<usize>) -> Result<GenerateSummary, CliError> {
    if m.generation.is_empty() {
        return Err(CliError::invariant("manifest has no [[generation]] entries"));
    }
    let backend = backend(m)?;
    let templates = templates(m)?;
    let mut synth = m.synth.clone();
    if let Some(j) = jobs {
        synth.jobs = j;
    }
    let miner = if m.generation.iter().any(|s| s.mine_negatives) {
        Some(m.base_params()?)
    } else {
        None
    };
    let out = run_generation(&m.generation, &backend.gateway, &templates, &synth, miner.as_ref())?;
    if out.report.total == 0 {
        return Err(CliError::invariant(format!(
            "generation produced no valid examples ({} rejected)",
            out.report.rejected
        )));
    }
    let data_dir = m.data_dir();
    fs::create_dir_all(&data_dir).map_err(|e| CliError::file(&data_dir, e))?;
    let mut files = Vec::new();
    for spec in &m.generation {
        let path = m.data_path(spec.category);
        let empty = Dataset::new();
        write_jsonl(out.datasets.get(&spec.category).unwrap_or(&empty), &path)?;
        files.push(path);
    }
    let gen_dir = m.output_dir.join("generation");
    write(&gen_dir.join("composition.csv"), out.report.to_csv())?;
    let tasks: String = out
        .tasks
        .iter()
        .map(|t| serde_json::to_string(t).expect("task serializes") + "\n")
        .collect();
    write(&gen_dir.join("tasks.jsonl"), tasks)?;
    write(&gen_dir.join("stats.json"), to_json(&out.stats))?;
    Ok(GenerateSummary {
        report: out.report,
        files,
    })
}

fn load_category(m: &ExperimentManifest, c: Category) -> Result<Dataset, CliError> {
    let path = m.data_path(c);
    if !path.exists() {
        return Err(CliError::file(&path, format!("no data for `{c}`; run generate or import first")));
    }
    Ok(read_jsonl(&path)?)
}

fn load_base(m: &ExperimentManifest) -> Result<Dataset, CliError> {
    match &m.base_data {
        Some(p) => Ok(read_jsonl(p)?),
        None => Ok(Dataset::new()),
    }
}

pub fn load_tasks(m: &ExperimentManifest) -> Result<Vec<EvalTask>, CliError> {
    let tasks = m.eval_tasks.iter().map(EvalTask::load).collect::<Result<Vec<_>, _>>()?;
    let mut ids: Vec<&str> = tasks.iter().map(|t| t.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(CliError::invariant(format!("duplicate task id `{}`", w[0])));
    }
    Ok(tasks)
}

#[derive(Debug, Clone, Serialize)]
struct TrainRecord {
    examples: usize,
    categories: Vec<Category>,
    examples_seen: usize,
    initial_loss: f64,
    final_loss: f64,
    loss_curve: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct TrainSummaryLine {
    pub checkpoint: PathBuf,
    pub examples: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains on the base data plus every data category.
pub fn train(m: &ExperimentManifest) -> Result<TrainSummaryLine, CliError> {
    let categories = m.data_categories();
    let mut data = load_base(m)?;
    for &c in &categories {
        data.extend(&load_category(m, c)?);
    }
    let report = train_model(&data, &m.base_params()?, &m.train)?;
    let checkpoint = m.checkpoint_path();
    if let Some(dir) = checkpoint.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
    }
    report.final_params.save(&checkpoint)?;
    // wall time is left out so reruns are byte-identical
    let record = TrainRecord {
        examples: data.len(),
        categories,
        examples_seen: report.examples_seen,
        initial_loss: report.initial_loss(),
        final_loss: report.final_loss(),
        loss_curve: report.loss_curve.clone(),
    };
    write(&m.output_dir.join("model").join("train_report.json"), to_json(&record))?;
    Ok(TrainSummaryLine {
        checkpoint,
        examples: data.len(),
        initial_loss: record.initial_loss,
        final_loss: record.final_loss,
    })
}

/// Scores a checkpoint (by default the trained one) on every evaluation task.
pub fn eval(m: &ExperimentManifest, checkpoint: Option<&Path>) -> Result<ScoreTable, CliError> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| m.checkpoint_path());
    if !path.exists() {
        return Err(CliError::file(&path, "checkpoint not found; run train first"));
    }
    let params = EmbedderParams::load(&path)?;
    let tasks = load_tasks(m)?;
    let scores = evaluate_suite(&params, &tasks)?;
    let dir = m.output_dir.join("eval");
    write(&dir.join("scores.json"), to_json(&scores))?;
    write(&dir.join("scores.csv"), scores.to_csv())?;
    Ok(scores)
}

/// Both influence matrices plus their rendered table.
#[derive(Debug, Clone)]
pub struct InfluenceOutputs {
    pub by_category: InfluenceMatrix,
    pub by_task: InfluenceMatrix,
    pub table: String,
    pub runs: usize,
}

fn factors(m: &ExperimentManifest) -> Result<Vec<Category>, CliError> {
    if m.influence_categories.is_empty() {
        return Err(CliError::invariant("influence_categories is empty"));
    }
    let mut f = m.influence_categories.clone();
    f.sort();
    f.dedup();
    if f.len() < 2 {
        // each group would hold a single run, leaving the t-test without variance
        return Err(CliError::invariant("influence needs at least two distinct categories"));
    }
    Ok(f)
}

/// Trains and scores one model per subset of the influence categories, then reports.
pub fn influence(m: &ExperimentManifest, jobs: usize, kind: TTestKind) -> Result<InfluenceOutputs, CliError> {
    let factors = factors(m)?;
    let data: BTreeMap<Category, Dataset> =
        factors.iter().map(|&c| Ok((c, load_category(m, c)?))).collect::<Result<_, CliError>>()?;
    let base = load_base(m)?;
    let params = m.base_params()?;
    let tasks = load_tasks(m)?;
    let inputs = GridInputs {
        data_by_category: &data,
        base: &base,
        base_params: &params,
        train: &m.train,
        tasks: &tasks,
    };
    let subsets = enumerate_subsets(&factors)?;
    let mut registry = Registry::open(m.registry_dir())?;
    let runs = run_grid(&inputs, &subsets, &mut registry, jobs)?;
    let failed: Vec<String> = runs.iter().filter(|r| !r.is_done()).map(|r| r.subset.label()).collect();
    if !failed.is_empty() {
        return Err(CliError::invariant(format!("runs failed: {}", failed.join(", "))));
    }
    write_influence(m, &factors, &runs, &tasks, kind)
}

/// Re-renders influence outputs from the stored registry without training.
pub fn report(m: &ExperimentManifest, kind: TTestKind) -> Result<InfluenceOutputs, CliError> {
    let factors = factors(m)?;
    let tasks = load_tasks(m)?;
    let registry = Registry::open(m.registry_dir())?;
    let mut runs = Vec::new();
    for s in enumerate_subsets(&factors)? {
        match registry.load_run(&s) {
            Some(r) if r.is_done() => runs.push(r),
            _ => {
                return Err(CliError::invariant(format!(
                    "no finished run for subset {} in {}; run influence first",
                    s.label(),
                    registry.dir().display()
                )))
            }
        }
    }
    write_influence(m, &factors, &runs, &tasks, kind)
}

fn write_influence(
    m: &ExperimentManifest,
    factors: &[Category],
    runs: &[ExperimentRun],
    tasks: &[EvalTask],
    kind: TTestKind,
) -> Result<InfluenceOutputs, CliError> {
    let by_category = InfluenceMatrix::compute(runs, factors, &category_metrics(tasks), m.alpha, kind)?;
    let mut task_cols = task_metrics(tasks);
    task_cols.push(Metric::Overall);
    let by_task = InfluenceMatrix::compute(runs, factors, &task_cols, m.alpha, kind)?;
    let dir = m.influence_dir();
    write(&dir.join("influence.csv"), by_category.influence_csv())?;
    write(&dir.join("pvalues.csv"), by_category.pvalues_csv())?;
    write(&dir.join("influence_tasks.csv"), by_task.influence_csv())?;
    write(&dir.join("pvalues_tasks.csv"), by_task.pvalues_csv())?;
    write(&dir.join("estimates.csv"), by_task.estimates_csv())?;
    write(
        &dir.join("influence.svg"),
        render_influence(&format!("{}: influence by task category", m.name), &by_category, m.alpha),
    )?;
    write(
        &dir.join("influence_tasks.svg"),
        render_influence(&format!("{}: influence by task", m.name), &by_task, m.alpha),
    )?;
    let table = influence_table(&by_category, m.alpha);
    Ok(InfluenceOutputs {
        by_category,
        by_task,
        table,
        runs: runs.len(),
    })
}

/// Plain-text matrix; `*` marks cells with p below `alpha`.
pub fn influence_table(m: &InfluenceMatrix, alpha: f64) -> String {
    let label_w = m.categories.iter().map(|c| c.as_str().len()).max().unwrap_or(0).max(8);
    let col_w = m.metrics.iter().map(String::len).max().unwrap_or(0).max(9);
    let mut out = format!("{:<label_w$}", "category");
    for name in &m.metrics {
        let _ = write!(out, "  {name:>col_w$}");
    }
    out.push('\n');
    for (c, row) in m.categories.iter().zip(&m.cells) {
        let _ = write!(out, "{:<label_w$}", c.as_str());
        for e in row {
            let cell = format!("{:+.2}{}", e.influence, if e.significant { "*" } else { " " });
            let _ = write!(out, "  {cell:>col_w$}");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "(points; * p < {alpha})");
    out
}

/// Imports a published corpus into `out_dir`, one JSONL file per category.
pub fn import(from: Option<&Path>, out_dir: &Path) -> Result<ImportReport, CliError> {
    let from: PathBuf = match from {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(PUBLISHED_DATA_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Env(format!("pass --from or set {PUBLISHED_DATA_ENV}")))?,
    };
    Ok(import_published(&from, out_dir)?)
}

/// Writes a self-contained planted experiment under `dir` and returns its manifest path.
///
/// The generator is the built-in planted mock, so the experiment runs offline.
pub fn init_planted(dir: &Path, seed: u64) -> Result<PathBuf, CliError> {
    let tasks = fixtures::eval_tasks(seed + 5);
    let mut task_paths = Vec::new();
    for t in &tasks {
        let rel = PathBuf::from("tasks").join(format!("{}.json", t.id));
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::file(parent, e))?;
        }
        t.save(&path)?;
        task_paths.push(rel);
    }
    write_jsonl(&fixtures::base_dataset(120, seed + 3), dir.join("base.jsonl"))?;
    let factors = [Category::LongShort, Category::ShortLong];
    let generation = factors
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut s = GenerationSpec::new(c, 1, 120);
            s.seed_base = 1000 * (i as u64 + 1);
            s
        })
        .collect();
    let mut manifest = ExperimentManifest {
        name: "planted".into(),
        seed,
        output_dir: "out".into(),
        alpha: synthembed::influence::DEFAULT_ALPHA,
        gateway: Default::default(),
        templates: synthembed::synth::DEFAULT_TEMPLATE_ID.into(),
        synth: Default::default(),
        generation,
        imported_categories: Vec::new(),
        base_data: Some("base.jsonl".into()),
        model: ModelSection {
            seed: Some(seed + 4),
            ..ModelSection::default()
        },
        train: fixtures::train_config(),
        eval_tasks: task_paths,
        influence_categories: factors.to_vec(),
    };
    manifest.train.seed = seed;
    manifest.gateway.mock = Some("planted".into());
    let path = dir.join("experiment.toml");
    write(&path, manifest.to_toml())?;
    Ok(path)
}

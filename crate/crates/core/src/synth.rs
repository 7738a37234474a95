//! Two-stage synthetic data generation: brainstorm task descriptions per
//! category, then generate one training instance per chat call.
//!
//! Also hosts the post-processing passes: hard-negative mining,
//! deduplication and the composition report.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::embedder::{cosine, EmbedError, TextEncoder};
use crate::gateway::{ChatBackend, ChatMessage, ChatRequest, GatewayError};
use crate::model::{Category, Dataset, ExampleError, Length, NegativeOrigin, SyntheticExample, TaskDescription};

pub const DEFAULT_TEMPLATE_ID: &str = "v1";
pub const DEFAULT_PARSE_RETRIES: usize = 3;
/// Short fields: at most this many characters, or at most two sentences.
pub const SHORT_MAX_CHARS: usize = 160;
pub const SHORT_MAX_SENTENCES: usize = 2;
pub const LONG_MIN_SENTENCES: usize = 3;

const REPAIR_PROMPT: &str = "That reply could not be parsed. Answer again with valid JSON only, no commentary.";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generation spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no task descriptions for `{category}` after {attempts} attempts")]
    NoTasks { category: Category, attempts: usize },
    #[error("unparseable response after {attempts} attempts: {reason}")]
    Parse { attempts: usize, reason: String },
    #[error("response is missing key `{0}`")]
    SchemaMismatch(&'static str),
    #[error("task category `{task}` does not match spec category `{spec}`")]
    CategoryMismatch { task: Category, spec: Category },
    #[error(transparent)]
    InvalidExample(#[from] ExampleError),
    #[error("no candidate negatives left after excluding the example's own positive")]
    EmptyCandidates,
    #[error("example already has a negative ({0:?})")]
    NegativePresent(NegativeOrigin),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("template {path}: {reason}")]
    Template { path: PathBuf, reason: String },
}

/// What to generate for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub category: Category,
    pub n_tasks: usize,
    pub n_instances_per_task: usize,
    #[serde(default = "default_template_id")]
    pub prompt_template_id: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed_base: u64,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Drop generated negatives and mine them from the category's own positives.
    #[serde(default)]
    pub mine_negatives: bool,
    /// Source and target language for bitext; stored inside the instruction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub languages: Option<(String, String)>,
}

fn default_template_id() -> String {
    DEFAULT_TEMPLATE_ID.to_string()
}
fn default_temperature() -> f64 {
    1.0
}
fn default_model() -> String {
    "generator".to_string()
}
fn default_max_tokens() -> u32 {
    1024
}

impl GenerationSpec {
    pub fn new(category: Category, n_tasks: usize, n_instances_per_task: usize) -> Self {
        GenerationSpec {
            category,
            n_tasks,
            n_instances_per_task,
            prompt_template_id: default_template_id(),
            temperature: default_temperature(),
            seed_base: 0,
            model: default_model(),
            max_tokens: default_max_tokens(),
            mine_negatives: false,
            languages: None,
        }
    }

    pub fn validate(&self, budget: usize) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_tasks == 0 || self.n_instances_per_task == 0 {
            return bad("n_tasks and n_instances_per_task must be positive".into());
        }
        if self.n_tasks.saturating_mul(self.n_instances_per_task) > budget {
            return bad(format!(
                "{} x {} instances exceeds the budget of {budget}",
                self.n_tasks, self.n_instances_per_task
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be finite and >= 0".into());
        }
        Ok(())
    }

    fn language_pair(&self) -> (String, String) {
        self.languages
            .clone()
            .unwrap_or_else(|| ("English".to_string(), "French".to_string()))
    }

    /// Form and length guidance substituted for `{category_hint}`.
    pub fn category_hint(&self) -> String {
        let side = |l: Length| match l {
            Length::Short => "a few words or a single sentence",
            Length::Long => "several sentences (at least three)",
            Length::Free => "any length",
        };
        match self.category {
            Category::Bitext => {
                let (src, tgt) = self.language_pair();
                format!("the query is a sentence in {src}; the positive is its translation in {tgt}; the negative is a {tgt} sentence with a different meaning")
            }
            Category::Sts => "query and positive are two sentences with the same meaning worded differently; the negative shares words but not meaning".to_string(),
            c => {
                let (q, d) = c.lengths();
                format!("the query is {}; the positive and negative are each {}", side(q), side(d))
            }
        }
    }

    fn instruction_for(&self, task: &TaskDescription) -> String {
        match self.category {
            Category::Bitext => {
                let (src, tgt) = self.language_pair();
                format!("{} (languages: {src} -> {tgt})", task.text)
            }
            _ => task.text.clone(),
        }
    }
}

/// Brainstorm and instance templates for each category.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub id: String,
    brainstorm: BTreeMap<Category, String>,
    instance: BTreeMap<Category, String>,
}

macro_rules! builtin {
    ($cat:literal) => {
        (
            include_str!(concat!("../templates/v1/", $cat, ".brainstorm.txt")),
            include_str!(concat!("../templates/v1/", $cat, ".instance.txt")),
        )
    };
}

impl TemplateSet {
    /// The bundled templates, or `None` for an unknown id.
    pub fn builtin(id: &str) -> Option<Self> {
        if id != DEFAULT_TEMPLATE_ID {
            return None;
        }
        let files = [
            (Category::ShortShort, builtin!("short-short")),
            (Category::ShortLong, builtin!("short-long")),
            (Category::LongLong, builtin!("long-long")),
            (Category::LongShort, builtin!("long-short")),
            (Category::Bitext, builtin!("bitext")),
            (Category::Sts, builtin!("sts")),
        ];
        Some(TemplateSet {
            id: id.to_string(),
            brainstorm: files.iter().map(|(c, (b, _))| (*c, b.to_string())).collect(),
            instance: files.iter().map(|(c, (_, i))| (*c, i.to_string())).collect(),
        })
    }

    /// Loads `<category>.brainstorm.txt` and `<category>.instance.txt` for every category.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, SynthError> {
        let dir = dir.as_ref();
        let read = |name: String| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| SynthError::Template {
                path: path.clone(),
                reason: e.to_string(),
            })
        };
        let mut brainstorm = BTreeMap::new();
        let mut instance = BTreeMap::new();
        for c in Category::ALL {
            brainstorm.insert(c, read(format!("{c}.brainstorm.txt"))?);
            instance.insert(c, read(format!("{c}.instance.txt"))?);
        }
        let id = dir.file_name().map_or("custom".into(), |n| n.to_string_lossy().into_owned());
        Ok(TemplateSet { id, brainstorm, instance })
    }

    fn render(template: &str, task: &str, hint: &str) -> String {
        template.replace("{task}", task).replace("{category_hint}", hint)
    }

    pub fn brainstorm_prompt(&self, spec: &GenerationSpec) -> String {
        Self::render(&self.brainstorm[&spec.category], "", &spec.category_hint())
    }

    pub fn instance_prompt(&self, spec: &GenerationSpec, task: &TaskDescription) -> String {
        Self::render(&self.instance[&spec.category], &task.text, &spec.category_hint())
    }
}

/// Counters shared by every stage of a generation run.
#[derive(Debug, Default)]
pub struct GenerationStats {
    pub requests: AtomicUsize,
    pub parse_retries: AtomicUsize,
    pub skipped: AtomicUsize,
    pub rejected: AtomicUsize,
    pub length_violations: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub requests: usize,
    pub parse_retries: usize,
    pub skipped: usize,
    pub rejected: usize,
    pub length_violations: usize,
}

impl GenerationStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        let g = |a: &AtomicUsize| a.load(Ordering::SeqCst);
        StatsSnapshot {
            requests: g(&self.requests),
            parse_retries: g(&self.parse_retries),
            skipped: g(&self.skipped),
            rejected: g(&self.rejected),
            length_violations: g(&self.length_violations),
        }
    }
}

/// Pipeline-wide knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub parse_retry_limit: usize,
    /// Upper bound on `n_tasks × n_instances_per_task` per spec.
    pub budget: usize,
    /// Concurrent instance requests.
    pub jobs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            parse_retry_limit: DEFAULT_PARSE_RETRIES,
            budget: 100_000,
            jobs: 8,
        }
    }
}

/// Strips code fences and surrounding prose, keeping the outermost `open..close` span.
fn json_span(text: &str, open: char, close: char) -> Option<&str> {
    let start = text.find(open)?;
    let end = text.rfind(close)?;
    (end > start).then(|| &text[start..=end])
}

fn parse_task_list(text: &str) -> Result<Vec<String>, String> {
    let span = json_span(text, '[', ']').ok_or("no JSON list in reply")?;
    let v: Vec<Value> = serde_json::from_str(span).map_err(|e| e.to_string())?;
    Ok(v.into_iter()
        .filter_map(|x| x.as_str().map(|s| s.trim().to_string()))
        .filter(|s| !s.is_empty())
        .collect())
}

fn request(spec: &GenerationSpec, messages: Vec<ChatMessage>, seed: u64) -> ChatRequest {
    ChatRequest {
        model: spec.model.clone(),
        messages,
        temperature: spec.temperature,
        max_tokens: spec.max_tokens,
        seed: Some(seed),
    }
}

/// Sends `prompt`, re-asking with a repair turn while `parse` fails.
fn ask_parsed<T, B: ChatBackend + ?Sized>(
    backend: &B,
    spec: &GenerationSpec,
    prompt: String,
    seed: u64,
    retry_limit: usize,
    stats: &GenerationStats,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<T, SynthError> {
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut last_reason = String::new();
    for attempt in 0..=retry_limit {
        if attempt > 0 {
            stats.parse_retries.fetch_add(1, Ordering::SeqCst);
        }
        stats.requests.fetch_add(1, Ordering::SeqCst);
        let reply = backend.complete(&request(spec, messages.clone(), seed))?;
        match parse(&reply.content) {
            Ok(v) => return Ok(v),
            Err(reason) => {
                last_reason = reason;
                messages.push(ChatMessage {
                    role: crate::gateway::Role::Assistant,
                    content: reply.content,
                });
                messages.push(ChatMessage::user(REPAIR_PROMPT));
            }
        }
    }
    Err(SynthError::Parse {
        attempts: retry_limit + 1,
        reason: last_reason,
    })
}

/// Stage one: asks for a JSON list of task descriptions for `spec.category`.
///
/// The first parseable reply ends the stage; at most `n_tasks` distinct
/// descriptions are kept. Ids are `<category>-<seed_base>-<index>`.
pub fn brainstorm_tasks<B: ChatBackend + ?Sized>(
    spec: &GenerationSpec,
    backend: &B,
    templates: &TemplateSet,
    config: &SynthConfig,
    stats: &GenerationStats,
) -> Result<Vec<TaskDescription>, SynthError> {
    spec.validate(config.budget)?;
    let prompt = templates.brainstorm_prompt(spec);
    let list = match ask_parsed(backend, spec, prompt, spec.seed_base, config.parse_retry_limit, stats, |t| {
        parse_task_list(t).and_then(|l| if l.is_empty() { Err("empty task list".into()) } else { Ok(l) })
    }) {
        Ok(l) => l,
        Err(SynthError::Parse { attempts, .. }) => {
            stats.skipped.fetch_add(1, Ordering::SeqCst);
            return Err(SynthError::NoTasks {
                category: spec.category,
                attempts,
            });
        }
        Err(e) => return Err(e),
    };
    let mut seen = HashSet::new();
    Ok(list
        .into_iter()
        .filter(|t| seen.insert(t.clone()))
        .take(spec.n_tasks)
        .enumerate()
        .map(|(i, text)| TaskDescription {
            id: format!("{}-{}-{i}", spec.category, spec.seed_base),
            category: spec.category,
            text,
        })
        .collect())
}

#[derive(Debug)]
struct InstanceFields {
    query: String,
    positive: String,
    negative: Option<String>,
}

enum FieldError {
    Unparseable(String),
    Missing(&'static str),
}

fn parse_instance(text: &str, need_negative: bool) -> Result<InstanceFields, FieldError> {
    let span = json_span(text, '{', '}').ok_or_else(|| FieldError::Unparseable("no JSON object in reply".into()))?;
    let v: Value = serde_json::from_str(span).map_err(|e| FieldError::Unparseable(e.to_string()))?;
    let field = |k: &'static str| v.get(k).and_then(Value::as_str).map(str::to_string);
    let query = field("query").ok_or(FieldError::Missing("query"))?;
    let positive = field("positive").ok_or(FieldError::Missing("positive"))?;
    let negative = if need_negative {
        Some(field("negative").ok_or(FieldError::Missing("negative"))?)
    } else {
        None
    };
    Ok(InstanceFields {
        query,
        positive,
        negative,
    })
}

/// Sentence count by terminal punctuation; a non-empty unterminated tail counts as one.
pub fn sentence_count(text: &str) -> usize {
    let mut count = 0;
    let mut pending = false;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if pending && chars.peek().is_none_or(|n| n.is_whitespace()) {
                count += 1;
                pending = false;
            }
        } else if !c.is_whitespace() {
            pending = true;
        }
    }
    count + usize::from(pending)
}

/// Whether `text` satisfies the length convention for `length`.
pub fn meets_length(text: &str, length: Length) -> bool {
    match length {
        Length::Short => text.chars().count() <= SHORT_MAX_CHARS || sentence_count(text) <= SHORT_MAX_SENTENCES,
        Length::Long => sentence_count(text) >= LONG_MIN_SENTENCES,
        Length::Free => true,
    }
}

/// Stage two: one training instance for `task`, using request seed
/// `seed_base + 1 + index`.
pub fn generate_instance<B: ChatBackend + ?Sized>(
    task: &TaskDescription,
    spec: &GenerationSpec,
    index: usize,
    backend: &B,
    templates: &TemplateSet,
    config: &SynthConfig,
    stats: &GenerationStats,
) -> Result<SyntheticExample, SynthError> {
    if task.category != spec.category {
        return Err(SynthError::CategoryMismatch {
            task: task.category,
            spec: spec.category,
        });
    }
    let need_negative = !spec.mine_negatives;
    let missing = Mutex::new(None);
    let prompt = templates.instance_prompt(spec, task);
    let seed = spec.seed_base.wrapping_add(1).wrapping_add(index as u64);
    let fields = ask_parsed(backend, spec, prompt, seed, config.parse_retry_limit, stats, |t| {
        match parse_instance(t, need_negative) {
            Ok(f) => Ok(Some(f)),
            // a well-formed object with the wrong keys is final, not a parse retry
            Err(FieldError::Missing(k)) => {
                *missing.lock().expect("missing lock") = Some(k);
                Ok(None)
            }
            Err(FieldError::Unparseable(r)) => Err(r),
        }
    })?;
    let Some(fields) = fields else {
        let key = missing.into_inner().expect("missing lock").expect("set when fields are absent");
        return Err(SynthError::SchemaMismatch(key));
    };
    let (q_len, d_len) = spec.category.lengths();
    let mut checks = vec![(fields.query.as_str(), q_len), (fields.positive.as_str(), d_len)];
    if let Some(n) = &fields.negative {
        checks.push((n, d_len));
    }
    let violations = checks.iter().filter(|(t, l)| !meets_length(t, *l)).count();
    stats.length_violations.fetch_add(violations, Ordering::SeqCst);

    Ok(SyntheticExample::new(
        spec.category,
        spec.instruction_for(task),
        fields.query,
        fields.positive,
        fields.negative,
        task.id.clone(),
        spec.model.clone(),
    )?)
}

/// Index and similarity of the best-scoring candidate, first on ties.
fn argmax_candidate(query: &[f64], candidates: &[(usize, Vec<f64>)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, emb) in candidates {
        let s = cosine(query, emb);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((*i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// The pool positive (same category, not the example's own positive) most
/// similar to the example's query.
pub fn mine_hard_negative<E: TextEncoder + ?Sized>(
    example: &SyntheticExample,
    pool: &Dataset,
    encoder: &E,
) -> Result<String, SynthError> {
    if example.negative_origin != NegativeOrigin::Absent {
        return Err(SynthError::NegativePresent(example.negative_origin));
    }
    let query = encoder.encode_query(&example.instruction, &example.query)?.into_values();
    let mut candidates = Vec::new();
    for (i, c) in pool.iter().enumerate() {
        if c.category == example.category && c.positive != example.positive {
            candidates.push((i, encoder.encode_document(&c.positive)?.into_values()));
        }
    }
    let best = argmax_candidate(&query, &candidates).ok_or(SynthError::EmptyCandidates)?;
    Ok(pool.examples()[best].positive.clone())
}

/// Fills every absent negative in `dataset` by mining from the dataset itself.
pub fn mine_negatives<E: TextEncoder + ?Sized>(dataset: &Dataset, encoder: &E) -> Result<Dataset, SynthError> {
    let mut docs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for ex in dataset {
        if !docs.contains_key(ex.positive.as_str()) {
            docs.insert(&ex.positive, encoder.encode_document(&ex.positive)?.into_values());
        }
    }
    let mut out = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let mut ex = ex.clone();
        if ex.negative_origin == NegativeOrigin::Absent {
            let query = encoder.encode_query(&ex.instruction, &ex.query)?.into_values();
            let candidates: Vec<(usize, Vec<f64>)> = dataset
                .iter()
                .enumerate()
                .filter(|(_, c)| c.category == ex.category && c.positive != ex.positive)
                .map(|(i, c)| (i, docs[c.positive.as_str()].clone()))
                .collect();
            let best = argmax_candidate(&query, &candidates).ok_or(SynthError::EmptyCandidates)?;
            ex.negative = Some(dataset.examples()[best].positive.clone());
            ex.negative_origin = NegativeOrigin::Mined;
        }
        out.push(ex);
    }
    Ok(Dataset::from_examples(out)?)
}

fn normalize_for_key(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Case-folded, whitespace-collapsed `query + "\x1f" + positive`.
pub fn dedup_key(example: &SyntheticExample) -> String {
    format!("{}\x1f{}", normalize_for_key(&example.query), normalize_for_key(&example.positive))
}

/// Removes later examples whose [`dedup_key`] was already seen.
pub fn deduplicate(dataset: &Dataset) -> (Dataset, usize) {
    let mut seen = HashSet::new();
    let mut kept = Dataset::new();
    kept.metadata = dataset.metadata.clone();
    let mut removed = 0;
    for ex in dataset {
        if seen.insert(dedup_key(ex)) {
            kept.push(ex.clone()).expect("examples of a valid dataset stay valid");
        } else {
            removed += 1;
        }
    }
    (kept, removed)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CompositionReport {
    pub counts: BTreeMap<Category, usize>,
    pub total: usize,
    pub rejected: usize,
    pub dedup_removed: usize,
}

/// Per-category counts with every category present (zero when absent).
pub fn compose_report(dataset: &Dataset) -> CompositionReport {
    let mut counts: BTreeMap<Category, usize> = Category::ALL.into_iter().map(|c| (c, 0)).collect();
    for ex in dataset {
        *counts.get_mut(&ex.category).expect("all categories seeded") += 1;
    }
    CompositionReport {
        total: counts.values().sum(),
        counts,
        rejected: 0,
        dedup_removed: 0,
    }
}

impl CompositionReport {
    pub fn count(&self, category: Category) -> usize {
        self.counts.get(&category).copied().unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["category", "count"]).expect("in-memory write");
        for (c, n) in &self.counts {
            w.write_record([c.as_str(), &n.to_string()]).expect("in-memory write");
        }
        for (k, v) in [("total", self.total), ("rejected", self.rejected), ("dedup_removed", self.dedup_removed)] {
            w.write_record([k, &v.to_string()]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    /// Aligned plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let rows: Vec<(String, usize)> = self
            .counts
            .iter()
            .map(|(c, n)| (c.to_string(), *n))
            .chain([
                ("total".to_string(), self.total),
                ("rejected".to_string(), self.rejected),
                ("dedup removed".to_string(), self.dedup_removed),
            ])
            .collect();
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let num_width = rows.iter().map(|(_, n)| n.to_string().len()).max().unwrap_or(1);
        for (i, (k, n)) in rows.iter().enumerate() {
            if i == self.counts.len() {
                let _ = writeln!(out, "{}", "-".repeat(width + num_width + 2));
            }
            let _ = writeln!(out, "{k:<width$}  {n:>num_width$}");
        }
        out
    }
}

/// Everything a generation run produced.
#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub datasets: BTreeMap<Category, Dataset>,
    pub tasks: Vec<TaskDescription>,
    pub report: CompositionReport,
    pub stats: StatsSnapshot,
}

/// Runs both stages for every spec, then mining, deduplication and the report.
///
/// Instance requests fan out over `config.jobs` threads; results are
/// assembled in (spec, task, instance) order, so the output does not depend
/// on completion order. Failed instances are counted as rejected. `miner`
/// is required when any spec mines its negatives.
pub fn run_generation<B: ChatBackend + ?Sized, E: TextEncoder + Sync + ?Sized>(
    specs: &[GenerationSpec],
    backend: &B,
    templates: &TemplateSet,
    config: &SynthConfig,
    miner: Option<&E>,
) -> Result<GenerationOutput, SynthError> {
    let stats = GenerationStats::default();
    let mut all_tasks = Vec::new();
    let mut jobs: Vec<(usize, TaskDescription, usize)> = Vec::new();
    for (s, spec) in specs.iter().enumerate() {
        if spec.mine_negatives && miner.is_none() {
            return Err(SynthError::InvalidSpec(format!("{}: mining needs an encoder", spec.category)));
        }
        let tasks = match brainstorm_tasks(spec, backend, templates, config, &stats) {
            Ok(t) => t,
            Err(SynthError::NoTasks { category, .. }) => {
                log::warn!("{category}: brainstorming produced no tasks; skipping");
                continue;
            }
            Err(e) => return Err(e),
        };
        for (t, task) in tasks.iter().enumerate() {
            for k in 0..spec.n_instances_per_task {
                jobs.push((s, task.clone(), t * spec.n_instances_per_task + k));
            }
        }
        all_tasks.extend(tasks);
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SyntheticExample>>> = Mutex::new(vec![None; jobs.len()]);
    let fatal: Mutex<Option<SynthError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..config.jobs.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() || fatal.lock().expect("fatal lock").is_some() {
                    break;
                }
                let (s, task, index) = &jobs[i];
                match generate_instance(task, &specs[*s], *index, backend, templates, config, &stats) {
                    Ok(ex) => results.lock().expect("results lock")[i] = Some(ex),
                    Err(SynthError::Gateway(e)) => {
                        *fatal.lock().expect("fatal lock") = Some(SynthError::Gateway(e));
                    }
                    Err(e) => {
                        log::debug!("instance {i} rejected: {e}");
                        stats.rejected.fetch_add(1, Ordering::SeqCst);
                    }
                }
            });
        }
    });
    if let Some(e) = fatal.into_inner().expect("fatal lock") {
        return Err(e);
    }

    let mut by_category: BTreeMap<Category, Vec<SyntheticExample>> = BTreeMap::new();
    for ex in results.into_inner().expect("results lock").into_iter().flatten() {
        by_category.entry(ex.category).or_default().push(ex);
    }
    let mut datasets = BTreeMap::new();
    let mut dedup_removed = 0;
    for (category, examples) in by_category {
        let mut data = Dataset::from_examples(examples)?;
        let (unique, removed) = deduplicate(&data);
        data = unique;
        dedup_removed += removed;
        if specs.iter().any(|s| s.category == category && s.mine_negatives) {
            data = mine_negatives(&data, miner.expect("checked above"))?;
        }
        datasets.insert(category, data);
    }
    let mut combined = Dataset::new();
    for d in datasets.values() {
        combined.extend(d);
    }
    let stats = stats.snapshot();
    let mut report = compose_report(&combined);
    report.rejected = stats.rejected;
    report.dedup_removed = dedup_removed;
    Ok(GenerationOutput {
        datasets,
        tasks: all_tasks,
        report,
        stats,
    })
}

//! Multi-task embedding evaluation: classification, clustering, retrieval,
//! reranking and STS over small JSON task files.
//!
//! Every evaluator embeds with a frozen encoder and is deterministic.
//! Query-side texts (classification and clustering inputs, retrieval and
//! reranking queries, both STS sentences) carry the task instruction;
//! documents and rerank candidates do not.

pub mod classify;
pub mod cluster;
pub mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{cosine, EmbedError, TextEncoder};
use classify::LogisticRegression;
use cluster::KMeans;

/// Candidate cap per retrieval query.
pub const MAX_CANDIDATES_PER_QUERY: usize = 250;
/// Cutoff of the retrieval metric.
pub const NDCG_CUTOFF: usize = 10;
/// Seed of the clustering restarts.
pub const CLUSTERING_SEED: u64 = 42;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("task `{task}`: {reason}")]
    InvalidTask { task: String, reason: String },
    #[error("task `{task}`: {source}")]
    Embedding {
        task: String,
        #[source]
        source: EmbedError,
    },
    #[error("unknown task id `{0}`")]
    UnknownTask(String),
    #[error("{path}: {reason}")]
    File { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskCategory {
    Classification,
    Clustering,
    Retrieval,
    Reranking,
    Sts,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 5] = [
        TaskCategory::Classification,
        TaskCategory::Clustering,
        TaskCategory::Retrieval,
        TaskCategory::Reranking,
        TaskCategory::Sts,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskCategory::Classification => "classification",
            TaskCategory::Clustering => "clustering",
            TaskCategory::Retrieval => "retrieval",
            TaskCategory::Reranking => "reranking",
            TaskCategory::Sts => "sts",
        }
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledText {
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub id: String,
    pub text: String,
    /// Candidate document ids; the whole corpus when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    /// Graded relevance by document id; unlisted documents have relevance 0.
    pub relevance: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankInstance {
    pub query: String,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub text1: String,
    pub text2: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "category", rename_all = "lowercase")]
pub enum TaskPayload {
    Classification {
        train: Vec<LabeledText>,
        test: Vec<LabeledText>,
    },
    Clustering {
        texts: Vec<LabeledText>,
    },
    Retrieval {
        corpus: Vec<Document>,
        queries: Vec<RetrievalQuery>,
    },
    Reranking {
        instances: Vec<RerankInstance>,
    },
    Sts {
        pairs: Vec<ScoredPair>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub id: String,
    #[serde(default)]
    pub instruction: String,
    #[serde(flatten)]
    pub payload: TaskPayload,
}

fn invalid(task: &str, reason: impl Into<String>) -> EvalError {
    EvalError::InvalidTask {
        task: task.to_string(),
        reason: reason.into(),
    }
}

fn label_counts(items: &[LabeledText]) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for it in items {
        *counts.entry(it.label.as_str()).or_insert(0) += 1;
    }
    counts
}

impl EvalTask {
    pub fn category(&self) -> TaskCategory {
        match self.payload {
            TaskPayload::Classification { .. } => TaskCategory::Classification,
            TaskPayload::Clustering { .. } => TaskCategory::Clustering,
            TaskPayload::Retrieval { .. } => TaskCategory::Retrieval,
            TaskPayload::Reranking { .. } => TaskCategory::Reranking,
            TaskPayload::Sts { .. } => TaskCategory::Sts,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let id = self.id.as_str();
        match &self.payload {
            TaskPayload::Classification { train, test } => {
                let counts = label_counts(train);
                if counts.len() < 2 {
                    return Err(invalid(id, "classification needs at least 2 classes"));
                }
                if let Some((label, n)) = counts.iter().find(|(_, n)| **n < 4) {
                    return Err(invalid(id, format!("class `{label}` has {n} training examples, need >= 4")));
                }
                if test.is_empty() {
                    return Err(invalid(id, "empty test split"));
                }
                if let Some(t) = test.iter().find(|t| !counts.contains_key(t.label.as_str())) {
                    return Err(invalid(id, format!("test label `{}` not in training split", t.label)));
                }
            }
            TaskPayload::Clustering { texts } => {
                let k = label_counts(texts).len();
                if k < 2 {
                    return Err(invalid(id, "clustering needs at least 2 gold groups"));
                }
                if texts.len() < 2 * k {
                    return Err(invalid(id, format!("{} texts for k = {k}, need >= {}", texts.len(), 2 * k)));
                }
            }
            TaskPayload::Retrieval { corpus, queries } => {
                let ids: BTreeSet<&str> = corpus.iter().map(|d| d.id.as_str()).collect();
                if ids.len() != corpus.len() {
                    return Err(invalid(id, "duplicate document ids"));
                }
                if queries.is_empty() {
                    return Err(invalid(id, "no queries"));
                }
                for q in queries {
                    let cands: Vec<&str> = match &q.candidates {
                        Some(c) => c.iter().map(String::as_str).collect(),
                        None => corpus.iter().map(|d| d.id.as_str()).collect(),
                    };
                    if cands.is_empty() {
                        return Err(invalid(id, format!("query `{}` has zero candidates", q.id)));
                    }
                    if cands.len() > MAX_CANDIDATES_PER_QUERY {
                        return Err(invalid(
                            id,
                            format!("query `{}` has {} candidates, max {MAX_CANDIDATES_PER_QUERY}", q.id, cands.len()),
                        ));
                    }
                    if let Some(c) = cands.iter().find(|c| !ids.contains(*c)) {
                        return Err(invalid(id, format!("query `{}` references unknown document `{c}`", q.id)));
                    }
                    if let Some(d) = q.relevance.keys().find(|d| !cands.contains(&d.as_str())) {
                        return Err(invalid(id, format!("query `{}` judges `{d}` outside its candidates", q.id)));
                    }
                    if !q.relevance.values().any(|&r| r > 0) {
                        return Err(invalid(id, format!("query `{}` has no relevant document", q.id)));
                    }
                }
            }
            TaskPayload::Reranking { instances } => {
                if instances.is_empty() {
                    return Err(invalid(id, "no reranking instances"));
                }
                for (i, inst) in instances.iter().enumerate() {
                    if inst.positives.is_empty() {
                        return Err(invalid(id, format!("instance {i} has no positive candidate")));
                    }
                    if inst.negatives.is_empty() {
                        return Err(invalid(id, format!("instance {i} has no negative candidate")));
                    }
                }
            }
            TaskPayload::Sts { pairs } => {
                if pairs.len() < 3 {
                    return Err(invalid(id, "STS needs at least 3 pairs"));
                }
                if pairs.iter().any(|p| !p.score.is_finite()) {
                    return Err(invalid(id, "non-finite gold score"));
                }
                if pairs.iter().all(|p| p.score == pairs[0].score) {
                    return Err(invalid(id, "constant gold scores"));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let file_err = |reason: String| EvalError::File {
            path: path.to_path_buf(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let task: EvalTask = serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))?;
        task.validate()?;
        Ok(task)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("task serialization is infallible");
        fs::write(path, json).map_err(|e| EvalError::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn embed_queries<E: TextEncoder>(enc: &E, task: &EvalTask, texts: &[&str]) -> Result<Vec<Vec<f64>>, EvalError> {
    texts
        .iter()
        .map(|t| {
            enc.encode_query(&task.instruction, t)
                .map(|e| e.into_values())
                .map_err(|source| EvalError::Embedding {
                    task: task.id.clone(),
                    source,
                })
        })
        .collect()
}

fn embed_documents<E: TextEncoder>(enc: &E, task: &EvalTask, texts: &[&str]) -> Result<Vec<Vec<f64>>, EvalError> {
    texts
        .iter()
        .map(|t| {
            enc.encode_document(t)
                .map(|e| e.into_values())
                .map_err(|source| EvalError::Embedding {
                    task: task.id.clone(),
                    source,
                })
        })
        .collect()
}

fn wrong_kind(task: &EvalTask, expected: TaskCategory) -> EvalError {
    invalid(&task.id, format!("expected a {expected} task, got {}", task.category()))
}

/// Test-split accuracy of a logistic-regression probe on frozen embeddings.
pub fn eval_classification<E: TextEncoder>(enc: &E, task: &EvalTask) -> Result<f64, EvalError> {
    task.validate()?;
    let TaskPayload::Classification { train, test } = &task.payload else {
        return Err(wrong_kind(task, TaskCategory::Classification));
    };
    let labels: BTreeMap<&str, usize> = label_counts(train).keys().enumerate().map(|(i, l)| (*l, i)).collect();
    fn texts(items: &[LabeledText]) -> Vec<&str> {
        items.iter().map(|t| t.text.as_str()).collect()
    }
    let x_train: Vec<Vec<f64>> = embed_queries(enc, task, &texts(train))?.into_iter().map(unit).collect();
    let x_test: Vec<Vec<f64>> = embed_queries(enc, task, &texts(test))?.into_iter().map(unit).collect();
    let y_train: Vec<usize> = train.iter().map(|t| labels[t.label.as_str()]).collect();
    let y_test: Vec<usize> = test.iter().map(|t| labels[t.label.as_str()]).collect();
    Ok(classification_accuracy(&x_train, &y_train, &x_test, &y_test, labels.len()))
}

/// Accuracy of the probe given embeddings directly.
pub fn classification_accuracy(
    x_train: &[Vec<f64>],
    y_train: &[usize],
    x_test: &[Vec<f64>],
    y_test: &[usize],
    n_classes: usize,
) -> f64 {
    LogisticRegression::default()
        .fit(x_train, y_train, n_classes)
        .accuracy(x_test, y_test)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteringScore {
    pub v_measure: f64,
    /// All embeddings were identical; the score carries no information.
    pub degenerate: bool,
}

/// V-measure of k-means (k = number of gold groups) on frozen embeddings.
pub fn eval_clustering<E: TextEncoder>(enc: &E, task: &EvalTask) -> Result<ClusteringScore, EvalError> {
    task.validate()?;
    let TaskPayload::Clustering { texts } = &task.payload else {
        return Err(wrong_kind(task, TaskCategory::Clustering));
    };
    let labels: BTreeMap<&str, usize> = label_counts(texts).keys().enumerate().map(|(i, l)| (*l, i)).collect();
    let raw: Vec<&str> = texts.iter().map(|t| t.text.as_str()).collect();
    let points: Vec<Vec<f64>> = embed_queries(enc, task, &raw)?.into_iter().map(unit).collect();
    let gold: Vec<usize> = texts.iter().map(|t| labels[t.label.as_str()]).collect();
    Ok(clustering_v_measure(&points, &gold, labels.len()))
}

pub fn clustering_v_measure(points: &[Vec<f64>], gold: &[usize], k: usize) -> ClusteringScore {
    let degenerate = points.iter().all(|p| p == &points[0]);
    let fit = KMeans::new(k, CLUSTERING_SEED).fit(points);
    ClusteringScore {
        v_measure: metrics::v_measure(gold, &fit.assignments).v_measure,
        degenerate,
    }
}

/// Mean nDCG@10 over queries, ranking candidates by cosine similarity.
pub fn eval_retrieval<E: TextEncoder>(enc: &E, task: &EvalTask) -> Result<f64, EvalError> {
    task.validate()?;
    let TaskPayload::Retrieval { corpus, queries } = &task.payload else {
        return Err(wrong_kind(task, TaskCategory::Retrieval));
    };
    let doc_texts: Vec<&str> = corpus.iter().map(|d| d.text.as_str()).collect();
    let docs = embed_documents(enc, task, &doc_texts)?;
    let index: BTreeMap<&str, usize> = corpus.iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect();
    let q_texts: Vec<&str> = queries.iter().map(|q| q.text.as_str()).collect();
    let q_emb = embed_queries(enc, task, &q_texts)?;
    let mut total = 0.0;
    for (q, qe) in queries.iter().zip(&q_emb) {
        let cands: Vec<usize> = match &q.candidates {
            Some(c) => c.iter().map(|id| index[id.as_str()]).collect(),
            None => (0..corpus.len()).collect(),
        };
        let scores: Vec<f64> = cands.iter().map(|&d| cosine(qe, &docs[d])).collect();
        let rel: Vec<u32> = cands
            .iter()
            .map(|&d| q.relevance.get(&corpus[d].id).copied().unwrap_or(0))
            .collect();
        total += metrics::ndcg_at_k(&scores, &rel, NDCG_CUTOFF);
    }
    Ok(total / queries.len() as f64)
}

/// Mean average precision over rerank instances.
pub fn eval_reranking<E: TextEncoder>(enc: &E, task: &EvalTask) -> Result<f64, EvalError> {
    task.validate()?;
    let TaskPayload::Reranking { instances } = &task.payload else {
        return Err(wrong_kind(task, TaskCategory::Reranking));
    };
    let mut total = 0.0;
    for inst in instances {
        let q = embed_queries(enc, task, &[inst.query.as_str()])?.remove(0);
        let cands: Vec<&str> = inst.positives.iter().chain(&inst.negatives).map(String::as_str).collect();
        let scores: Vec<f64> = embed_documents(enc, task, &cands)?.iter().map(|d| cosine(&q, d)).collect();
        let relevant: Vec<bool> = (0..cands.len()).map(|i| i < inst.positives.len()).collect();
        total += metrics::average_precision(&scores, &relevant);
    }
    Ok(total / instances.len() as f64)
}

/// Spearman correlation between cosine similarities and gold scores.
pub fn eval_sts<E: TextEncoder>(enc: &E, task: &EvalTask) -> Result<f64, EvalError> {
    task.validate()?;
    let TaskPayload::Sts { pairs } = &task.payload else {
        return Err(wrong_kind(task, TaskCategory::Sts));
    };
    let a: Vec<&str> = pairs.iter().map(|p| p.text1.as_str()).collect();
    let b: Vec<&str> = pairs.iter().map(|p| p.text2.as_str()).collect();
    let ea = embed_queries(enc, task, &a)?;
    let eb = embed_queries(enc, task, &b)?;
    let sims: Vec<f64> = ea.iter().zip(&eb).map(|(x, y)| cosine(x, y)).collect();
    let gold: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    Ok(metrics::spearman(&sims, &gold))
}

/// Score of one task through the evaluator matching its category.
pub fn evaluate_task<E: TextEncoder>(enc: &E, task: &EvalTask) -> Result<f64, EvalError> {
    match task.category() {
        TaskCategory::Classification => eval_classification(enc, task),
        TaskCategory::Clustering => {
            let s = eval_clustering(enc, task)?;
            if s.degenerate {
                log::warn!("task `{}`: all embeddings identical, clustering is degenerate", task.id);
            }
            Ok(s.v_measure)
        }
        TaskCategory::Retrieval => eval_retrieval(enc, task),
        TaskCategory::Reranking => eval_reranking(enc, task),
        TaskCategory::Sts => eval_sts(enc, task),
    }
}

/// Per-task scores with category means and the overall mean over tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub per_task: BTreeMap<String, f64>,
    pub per_category: BTreeMap<TaskCategory, f64>,
    pub overall: f64,
}

/// Aggregates per-task scores: unweighted category means, overall mean over tasks.
pub fn aggregate(
    per_task: &BTreeMap<String, f64>,
    registry: &BTreeMap<String, TaskCategory>,
) -> Result<ScoreTable, EvalError> {
    let mut sums: BTreeMap<TaskCategory, (f64, usize)> = BTreeMap::new();
    for (id, &score) in per_task {
        let cat = registry.get(id).ok_or_else(|| EvalError::UnknownTask(id.clone()))?;
        let e = sums.entry(*cat).or_insert((0.0, 0));
        e.0 += score;
        e.1 += 1;
    }
    let per_category = sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
    let overall = if per_task.is_empty() {
        0.0
    } else {
        per_task.values().sum::<f64>() / per_task.len() as f64
    };
    Ok(ScoreTable {
        per_task: per_task.clone(),
        per_category,
        overall,
    })
}

/// Evaluates every task and aggregates.
pub fn evaluate_suite<E: TextEncoder>(enc: &E, tasks: &[EvalTask]) -> Result<ScoreTable, EvalError> {
    let mut per_task = BTreeMap::new();
    let mut registry = BTreeMap::new();
    for task in tasks {
        per_task.insert(task.id.clone(), evaluate_task(enc, task)?);
        registry.insert(task.id.clone(), task.category());
    }
    aggregate(&per_task, &registry)
}

impl ScoreTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["level", "name", "score"]).expect("in-memory write");
        for (id, s) in &self.per_task {
            w.write_record(["task", id, &format!("{s:.6}")]).expect("in-memory write");
        }
        for (c, s) in &self.per_category {
            w.write_record(["category", c.as_str(), &format!("{s:.6}")]).expect("in-memory write");
        }
        w.write_record(["overall", "all", &format!("{:.6}", self.overall)]).expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

//! Streaming import of externally produced synthetic corpora.
//!
//! Input is JSON Lines, either one file or a directory searched recursively
//! for `*.jsonl`. Field names vary between releases, so each record is read
//! leniently: the category comes from a `category`/`task_type`/`type`
//! field, or failing that from the file stem (`short_long.jsonl`); text
//! fields accept a few common aliases. Records are streamed, never held
//! in memory all at once.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;
use thiserror::Error;

use crate::model::{Category, SyntheticExample};

const CATEGORY_KEYS: &[&str] = &["category", "task_type", "type", "subset"];
const QUERY_KEYS: &[&str] = &["query", "user_query", "input"];
const POSITIVE_KEYS: &[&str] = &["positive", "pos", "positive_document", "document"];
const NEGATIVE_KEYS: &[&str] = &["negative", "neg", "hard_negative_document", "hard_negative"];
const INSTRUCTION_KEYS: &[&str] = &["instruction", "task", "task_description"];

#[derive(Debug, Error)]
pub enum ImportError {
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("{0}: no JSONL files found")]
    NoFiles(PathBuf),
}

/// Counts gathered while importing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImportReport {
    /// Records per category, whether or not they form a valid example.
    pub records: BTreeMap<Category, usize>,
    /// Records that became valid examples, per category.
    pub valid: BTreeMap<Category, usize>,
    pub invalid: usize,
    pub unknown_category: usize,
    pub malformed_lines: usize,
    pub files: usize,
}

impl ImportReport {
    pub fn total_records(&self) -> usize {
        self.records.values().sum()
    }
}

fn text_field(obj: &serde_json::Map<String, Value>, keys: &[&str]) -> Option<String> {
    keys.iter().find_map(|k| match obj.get(*k) {
        Some(Value::String(s)) => Some(s.clone()),
        // some releases store negatives as lists
        Some(Value::Array(items)) => items.iter().find_map(|v| v.as_str().map(str::to_string)),
        _ => None,
    })
}

fn record_category(obj: &serde_json::Map<String, Value>, fallback: Option<Category>) -> Option<Category> {
    CATEGORY_KEYS
        .iter()
        .find_map(|k| obj.get(*k).and_then(Value::as_str).and_then(Category::parse_lenient))
        .or(fallback)
}

fn jsonl_files(root: &Path) -> Result<Vec<PathBuf>, ImportError> {
    let io = |e: std::io::Error| ImportError::Io {
        path: root.to_path_buf(),
        reason: e.to_string(),
    };
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "jsonl") {
                out.push(path);
            }
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(ImportError::NoFiles(root.to_path_buf()));
    }
    Ok(out)
}

/// Streams every record under `root` to `sink`; invalid records are counted
/// but not passed on.
pub fn scan_published(
    root: impl AsRef<Path>,
    mut sink: impl FnMut(SyntheticExample) -> Result<(), ImportError>,
) -> Result<ImportReport, ImportError> {
    let mut report = ImportReport::default();
    for path in jsonl_files(root.as_ref())? {
        report.files += 1;
        let fallback = path.file_stem().and_then(|s| s.to_str()).and_then(Category::parse_lenient);
        let file = File::open(&path).map_err(|e| ImportError::Io {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| ImportError::Io {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(&line) else {
                report.malformed_lines += 1;
                continue;
            };
            let Some(category) = record_category(&obj, fallback) else {
                report.unknown_category += 1;
                continue;
            };
            *report.records.entry(category).or_default() += 1;
            let example = match (text_field(&obj, QUERY_KEYS), text_field(&obj, POSITIVE_KEYS)) {
                (Some(q), Some(p)) => SyntheticExample::new(
                    category,
                    text_field(&obj, INSTRUCTION_KEYS).unwrap_or_default(),
                    q,
                    p,
                    text_field(&obj, NEGATIVE_KEYS).filter(|n| !n.trim().is_empty()),
                    obj.get("task_id").and_then(Value::as_str).unwrap_or("imported"),
                    obj.get("generator").and_then(Value::as_str).unwrap_or("imported"),
                )
                .ok(),
                _ => None,
            };
            match example {
                Some(ex) => {
                    *report.valid.entry(category).or_default() += 1;
                    sink(ex)?;
                }
                None => report.invalid += 1,
            }
        }
    }
    Ok(report)
}

/// Imports into `out_dir/<category>.jsonl`, one file per category seen.
pub fn import_published(root: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<ImportReport, ImportError> {
    let out_dir = out_dir.as_ref();
    let io = |path: &Path, e: std::io::Error| ImportError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let mut writers: BTreeMap<Category, (PathBuf, BufWriter<File>)> = BTreeMap::new();
    let report = scan_published(root, |ex| {
        let (path, w) = match writers.entry(ex.category) {
            Entry::Occupied(o) => o.into_mut(),
            Entry::Vacant(v) => {
                let path = out_dir.join(format!("{}.jsonl", ex.category));
                let f = File::create(&path).map_err(|e| io(&path, e))?;
                v.insert((path, BufWriter::new(f)))
            }
        };
        let line = serde_json::to_string(&ex).expect("examples serialize");
        writeln!(w, "{line}").map_err(|e| io(path, e))
    })?;
    for (_, (path, mut w)) in writers {
        w.flush().map_err(|e| io(&path, e))?;
    }
    Ok(report)
}

//! Shared domain types and the JSONL interchange format.
//!
//! Every stage of the pipeline reads and writes [`Dataset`]s as JSON Lines,
//! one [`SyntheticExample`] per line. Field names are fixed:
//! `instruction`, `query`, `positive`, `negative`, `category`, `task_id`,
//! `generator`, `negative_origin`. The `negative` key is omitted when the
//! example has no hard negative.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One of the six query/document length regimes of the synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    ShortShort,
    ShortLong,
    LongLong,
    LongShort,
    Bitext,
    Sts,
}

/// Length regime of one side of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Length {
    Short,
    Long,
    /// No length convention is enforced.
    Free,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::ShortShort,
        Category::ShortLong,
        Category::LongLong,
        Category::LongShort,
        Category::Bitext,
        Category::Sts,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::ShortShort => "short-short",
            Category::ShortLong => "short-long",
            Category::LongLong => "long-long",
            Category::LongShort => "long-short",
            Category::Bitext => "bitext",
            Category::Sts => "sts",
        }
    }

    /// Expected lengths of (query, document).
    pub fn lengths(self) -> (Length, Length) {
        match self {
            Category::ShortShort => (Length::Short, Length::Short),
            Category::ShortLong => (Length::Short, Length::Long),
            Category::LongLong => (Length::Long, Length::Long),
            Category::LongShort => (Length::Long, Length::Short),
            Category::Bitext | Category::Sts => (Length::Free, Length::Free),
        }
    }

    /// Lenient parse used when importing corpora that spell categories
    /// differently (`short_long`, `STS`, `Short-Short`).
    pub fn parse_lenient(s: &str) -> Option<Category> {
        let squash = |t: &str| -> String {
            t.chars()
                .filter(|c| !matches!(c, '-' | '_' | ' '))
                .map(|c| c.to_ascii_lowercase())
                .collect()
        };
        let norm = squash(s.trim());
        Category::ALL.into_iter().find(|c| squash(c.as_str()) == norm)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
#[error("unknown category `{0}`")]
pub struct UnknownCategory(pub String);

impl FromStr for Category {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| UnknownCategory(s.to_string()))
    }
}

/// Where an example's hard negative came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeOrigin {
    Generated,
    Mined,
    Absent,
}

/// Invariant violation on a single example.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExampleError {
    #[error("field `{0}` is empty")]
    EmptyField(&'static str),
    #[error("query and positive are identical")]
    QueryEqualsPositive,
    #[error("negative_origin is `absent` but a negative is set")]
    UnexpectedNegative,
    #[error("negative_origin is `{0:?}` but no negative is set")]
    MissingNegative(NegativeOrigin),
}

impl ExampleError {
    pub fn field(&self) -> &'static str {
        match self {
            ExampleError::EmptyField(f) => f,
            ExampleError::QueryEqualsPositive => "positive",
            ExampleError::UnexpectedNegative | ExampleError::MissingNegative(_) => "negative",
        }
    }
}

/// One training instance: instruction, query, positive and optional hard negative.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub instruction: String,
    pub query: String,
    pub positive: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative: Option<String>,
    pub category: Category,
    pub task_id: String,
    pub generator: String,
    pub negative_origin: NegativeOrigin,
}

impl SyntheticExample {
    /// Builds an example with a generated negative (or none when `negative` is `None`).
    pub fn new(
        category: Category,
        instruction: impl Into<String>,
        query: impl Into<String>,
        positive: impl Into<String>,
        negative: Option<String>,
        task_id: impl Into<String>,
        generator: impl Into<String>,
    ) -> Result<Self, ExampleError> {
        let negative_origin = if negative.is_some() {
            NegativeOrigin::Generated
        } else {
            NegativeOrigin::Absent
        };
        let ex = SyntheticExample {
            instruction: instruction.into(),
            query: query.into(),
            positive: positive.into(),
            negative,
            category,
            task_id: task_id.into(),
            generator: generator.into(),
            negative_origin,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<(), ExampleError> {
        if self.query.trim().is_empty() {
            return Err(ExampleError::EmptyField("query"));
        }
        if self.positive.trim().is_empty() {
            return Err(ExampleError::EmptyField("positive"));
        }
        if self.query.trim() == self.positive.trim() {
            return Err(ExampleError::QueryEqualsPositive);
        }
        match (self.negative_origin, &self.negative) {
            (NegativeOrigin::Absent, Some(_)) => Err(ExampleError::UnexpectedNegative),
            (NegativeOrigin::Absent, None) => Ok(()),
            (origin, None) => Err(ExampleError::MissingNegative(origin)),
            (_, Some(n)) if n.trim().is_empty() => Err(ExampleError::EmptyField("negative")),
            _ => Ok(()),
        }
    }
}

/// A brainstormed embedding-task description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescription {
    pub id: String,
    pub category: Category,
    pub text: String,
}

/// Ordered collection of examples plus free-form provenance metadata.
///
/// Only the examples travel through JSONL; metadata is an in-memory annotation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    examples: Vec<SyntheticExample>,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_examples(examples: Vec<SyntheticExample>) -> Result<Self, ExampleError> {
        for ex in &examples {
            ex.validate()?;
        }
        Ok(Dataset {
            examples,
            metadata: BTreeMap::new(),
        })
    }

    pub fn push(&mut self, example: SyntheticExample) -> Result<(), ExampleError> {
        example.validate()?;
        self.examples.push(example);
        Ok(())
    }

    pub fn extend(&mut self, other: &Dataset) {
        self.examples.extend(other.examples.iter().cloned());
    }

    pub fn size(&self) -> usize {
        self.examples.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[SyntheticExample] {
        &self.examples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SyntheticExample> {
        self.examples.iter()
    }

    pub fn into_examples(self) -> Vec<SyntheticExample> {
        self.examples
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a SyntheticExample;
    type IntoIter = std::slice::Iter<'a, SyntheticExample>;

    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}

/// Fixed-length real vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

#[derive(Debug, Clone, PartialEq, Error)]
#[error("embedding entry {index} is not finite ({value})")]
pub struct NonFiniteEmbedding {
    pub index: usize,
    pub value: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, NonFiniteEmbedding> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(NonFiniteEmbedding { index, value });
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

/// Errors from reading or writing JSONL datasets.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: schema violation in field `{field}`: {reason}")]
    Schema {
        path: PathBuf,
        line: usize,
        field: &'static str,
        reason: String,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExample {
    instruction: Option<String>,
    query: Option<String>,
    positive: Option<String>,
    negative: Option<String>,
    category: Option<String>,
    task_id: Option<String>,
    generator: Option<String>,
    negative_origin: Option<NegativeOrigin>,
}

fn schema(path: &Path, line: usize, field: &'static str, reason: impl Into<String>) -> DataError {
    DataError::Schema {
        path: path.to_path_buf(),
        line,
        field,
        reason: reason.into(),
    }
}

fn parse_line(path: &Path, line: usize, text: &str) -> Result<SyntheticExample, DataError> {
    let raw: RawExample = serde_json::from_str(text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        line,
        source,
    })?;
    let req = |v: Option<String>, field: &'static str| {
        v.ok_or_else(|| schema(path, line, field, "missing required field"))
    };
    let category_name = req(raw.category, "category")?;
    let category = category_name
        .parse::<Category>()
        .map_err(|e| schema(path, line, "category", e.to_string()))?;
    let negative_origin = match raw.negative_origin {
        Some(o) => o,
        None => return Err(schema(path, line, "negative_origin", "missing required field")),
    };
    let ex = SyntheticExample {
        instruction: req(raw.instruction, "instruction")?,
        query: req(raw.query, "query")?,
        positive: req(raw.positive, "positive")?,
        negative: raw.negative,
        category,
        task_id: req(raw.task_id, "task_id")?,
        generator: req(raw.generator, "generator")?,
        negative_origin,
    };
    ex.validate()
        .map_err(|e| schema(path, line, e.field(), e.to_string()))?;
    Ok(ex)
}

/// Reads a JSONL dataset; blank lines are skipped, line numbers are 1-based.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut examples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(parse_line(path, idx + 1, &line)?);
    }
    Ok(Dataset {
        examples,
        metadata: BTreeMap::new(),
    })
}

/// Writes one JSON object per line, UTF-8, `\n` terminated.
pub fn write_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for ex in dataset {
        let line = serde_json::to_string(ex).expect("example serialization is infallible");
        out.write_all(line.as_bytes()).map_err(io_err)?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

//! Desk-scale text encoder.
//!
//! Text is mapped to hashed character n-gram counts, L1-normalized (mean
//! pooling over n-gram slots), then linearly projected to `R^d`:
//!
//! ```text
//! embed(x) = Pᵀ · φ(x),   φ(x) ∈ R^B (sparse, ‖φ(x)‖₁ = 1),   P ∈ R^{B×d}
//! ```
//!
//! Similarity between embeddings is cosine similarity. Queries may carry an
//! instruction that is prepended before featurization; documents never do.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::model::{EmbeddingVector, NonFiniteEmbedding};

/// Seed of the n-gram hash. Changing it invalidates every checkpoint.
pub const NGRAM_HASH_SEED: u64 = 0x5EED_C0DE_2024_0001;

/// Joins an instruction to the query it conditions.
pub const INSTRUCTION_SEPARATOR: &str = "\n";

const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("invalid featurizer config: {0}")]
    InvalidFeaturizer(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    NonFinite(#[from] NonFiniteEmbedding),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub min_n: usize,
    pub max_n: usize,
    pub hash_buckets: usize,
    pub lowercase: bool,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            min_n: 3,
            max_n: 5,
            hash_buckets: 2048,
            lowercase: true,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if !(1 <= self.min_n && self.min_n <= self.max_n && self.max_n <= 8) {
            return Err(EmbedError::InvalidFeaturizer(format!(
                "n-gram range ({}, {}) must satisfy 1 <= min <= max <= 8",
                self.min_n, self.max_n
            )));
        }
        if self.hash_buckets < 2 || !self.hash_buckets.is_power_of_two() {
            return Err(EmbedError::InvalidFeaturizer(format!(
                "hash_buckets {} must be a power of two >= 2",
                self.hash_buckets
            )));
        }
        Ok(())
    }

    /// Bucket of a single n-gram.
    pub fn bucket(&self, gram: &str) -> u32 {
        (xxh3_64_with_seed(gram.as_bytes(), NGRAM_HASH_SEED) & (self.hash_buckets as u64 - 1)) as u32
    }
}

/// Sparse, L1-normalized n-gram feature vector sorted by bucket index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseFeatures {
    entries: Vec<(u32, f64)>,
}

impl SparseFeatures {
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    /// True for the zero vector produced by empty text.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w.abs()).sum()
    }

    pub fn to_dense(&self, buckets: usize) -> Vec<f64> {
        let mut out = vec![0.0; buckets];
        for &(b, w) in &self.entries {
            out[b as usize] += w;
        }
        out
    }
}

/// Hashed character n-gram counts of `text`, L1-normalized.
///
/// Whitespace runs collapse to one space before n-gram extraction. Empty or
/// whitespace-only text maps to the zero vector.
pub fn featurize(config: &FeaturizerConfig, text: &str) -> SparseFeatures {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let norm = if config.lowercase {
        collapsed.to_lowercase()
    } else {
        collapsed
    };
    // byte offsets of char boundaries, plus the end
    let mut bounds: Vec<usize> = norm.char_indices().map(|(i, _)| i).collect();
    bounds.push(norm.len());
    let n_chars = bounds.len() - 1;

    let mut buckets = Vec::new();
    for n in config.min_n..=config.max_n {
        if n > n_chars {
            break;
        }
        for start in 0..=(n_chars - n) {
            buckets.push(config.bucket(&norm[bounds[start]..bounds[start + n]]));
        }
    }
    if buckets.is_empty() {
        return SparseFeatures::default();
    }
    buckets.sort_unstable();
    let total = buckets.len() as f64;
    let mut entries: Vec<(u32, f64)> = Vec::new();
    for b in buckets {
        match entries.last_mut() {
            Some((last, count)) if *last == b => *count += 1.0,
            _ => entries.push((b, 1.0)),
        }
    }
    for (_, w) in &mut entries {
        *w /= total;
    }
    SparseFeatures { entries }
}

/// Whether the query-side instruction participates in featurization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstructionMode {
    Prepend,
    Ignore,
}

/// Projection matrix (row-major, `hash_buckets × dim`) plus featurizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    projection: Vec<f64>,
    dim: usize,
    featurizer: FeaturizerConfig,
    instruction_mode: InstructionMode,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    dim: usize,
    featurizer: FeaturizerConfig,
    instruction_mode: InstructionMode,
    projection: Vec<f64>,
}

impl EmbedderParams {
    pub fn new(
        featurizer: FeaturizerConfig,
        dim: usize,
        projection: Vec<f64>,
        instruction_mode: InstructionMode,
    ) -> Result<Self, EmbedError> {
        featurizer.validate()?;
        if dim < 2 {
            return Err(EmbedError::InvalidParams(format!("dim {dim} must be >= 2")));
        }
        if projection.len() != featurizer.hash_buckets * dim {
            return Err(EmbedError::InvalidParams(format!(
                "projection has {} entries, expected {} x {}",
                projection.len(),
                featurizer.hash_buckets,
                dim
            )));
        }
        if let Some(i) = projection.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::InvalidParams(format!("projection entry {i} is not finite")));
        }
        Ok(EmbedderParams {
            projection,
            dim,
            featurizer,
            instruction_mode,
        })
    }

    pub fn zeros(featurizer: FeaturizerConfig, dim: usize) -> Result<Self, EmbedError> {
        let n = featurizer.hash_buckets * dim;
        Self::new(featurizer, dim, vec![0.0; n], InstructionMode::Prepend)
    }

    /// Gaussian initialization with standard deviation `scale`, seeded.
    pub fn random(
        featurizer: FeaturizerConfig,
        dim: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self, EmbedError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale)
            .map_err(|e| EmbedError::InvalidParams(format!("init scale {scale}: {e}")))?;
        let n = featurizer.hash_buckets * dim;
        let projection = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Self::new(featurizer, dim, projection, InstructionMode::Prepend)
    }

    pub fn with_instruction_mode(mut self, mode: InstructionMode) -> Self {
        self.instruction_mode = mode;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hash_buckets(&self) -> usize {
        self.featurizer.hash_buckets
    }

    pub fn featurizer(&self) -> &FeaturizerConfig {
        &self.featurizer
    }

    pub fn instruction_mode(&self) -> InstructionMode {
        self.instruction_mode
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub(crate) fn projection_mut(&mut self) -> &mut [f64] {
        &mut self.projection
    }

    pub fn row(&self, bucket: usize) -> &[f64] {
        &self.projection[bucket * self.dim..(bucket + 1) * self.dim]
    }

    /// Returns a copy with every projection entry multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> EmbedderParams {
        let mut out = self.clone();
        out.projection.iter_mut().for_each(|v| *v *= factor);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.projection.iter().all(|v| v.is_finite())
    }

    /// Text actually featurized for a query carrying `instruction`.
    pub fn effective_text(&self, instruction: &str, text: &str) -> String {
        match self.instruction_mode {
            InstructionMode::Prepend if !instruction.trim().is_empty() => {
                format!("{instruction}{INSTRUCTION_SEPARATOR}{text}")
            }
            _ => text.to_string(),
        }
    }

    pub fn featurize(&self, text: &str) -> SparseFeatures {
        featurize(&self.featurizer, text)
    }

    /// `Pᵀ · features` without finiteness checks.
    pub fn project(&self, features: &SparseFeatures) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(b, w) in features.entries() {
            for (o, p) in out.iter_mut().zip(self.row(b as usize)) {
                *o += w * p;
            }
        }
        out
    }

    pub fn embed(&self, instruction: &str, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let feats = self.featurize(&self.effective_text(instruction, text));
        Ok(EmbeddingVector::new(self.project(&feats))?)
    }

    pub fn embed_document(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        self.embed("", text)
    }

    /// Stable 64-bit digest of the parameters, used to assert that
    /// evaluation leaves an encoder untouched.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.projection.len() * 8 + 32);
        for v in &self.projection {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        bytes.extend_from_slice(&(self.dim as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.featurizer.hash_buckets as u64).to_le_bytes());
        bytes.push(self.featurizer.min_n as u8);
        bytes.push(self.featurizer.max_n as u8);
        bytes.push(self.featurizer.lowercase as u8);
        bytes.push(matches!(self.instruction_mode, InstructionMode::Prepend) as u8);
        xxh3_64_with_seed(&bytes, 0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dim: self.dim,
            featurizer: self.featurizer,
            instruction_mode: self.instruction_mode,
            projection: self.projection.clone(),
        })
        .expect("checkpoint serialization is infallible")
    }

    pub fn from_json(json: &str) -> Result<Self, EmbedError> {
        let bad = |reason: String| EmbedError::Checkpoint {
            path: "<memory>".into(),
            reason,
        };
        let ck: Checkpoint = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {}", ck.format_version)));
        }
        Self::new(ck.featurizer, ck.dim, ck.projection, ck.instruction_mode)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbedError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| EmbedError::Checkpoint {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        let path = path.as_ref();
        let json = fs::read_to_string(path).map_err(|e| EmbedError::Checkpoint {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&json).map_err(|e| match e {
            EmbedError::Checkpoint { reason, .. } => EmbedError::Checkpoint {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }
}

/// Free-function form of [`EmbedderParams::embed`].
pub fn embed(params: &EmbedderParams, instruction: &str, text: &str) -> Result<EmbeddingVector, EmbedError> {
    params.embed(instruction, text)
}

/// Cosine similarity on raw slices. Zero vectors have similarity 0 by convention.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Cosine similarity in `[-1, 1]`; 0 when either vector is zero.
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    cosine(a.values(), b.values())
}

/// Anything that can embed queries (with instruction) and documents.
pub trait TextEncoder {
    fn encode_query(&self, instruction: &str, text: &str) -> Result<EmbeddingVector, EmbedError>;
    fn encode_document(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

impl TextEncoder for EmbedderParams {
    fn encode_query(&self, instruction: &str, text: &str) -> Result<EmbeddingVector, EmbedError> {
        self.embed(instruction, text)
    }

    fn encode_document(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        self.embed_document(text)
    }
}

//! Contrastive objective, its analytic gradient and the minibatch training loop.
//!
//! For a query `q`, positive `p` and negatives `n_1..n_k` with cosine
//! similarities `s⁺ = cos(e_q, e_p)` and `s_j = cos(e_q, e_{n_j})`:
//!
//! ```text
//! L = −log( exp(s⁺/τ) / (exp(s⁺/τ) + Σ_j exp(s_j/τ)) )
//! ```
//!
//! With `τ = 1` this is the plain multi-negative form. The gradient flows
//! through the cosine quotient rule into each text embedding `e = Pᵀφ`, and
//! from there into the rows of `P` touched by the text's features.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{EmbedderParams, SparseFeatures};
use crate::model::Dataset;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("instance has no negatives")]
    EmptyNegatives,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("example {0} has no negative and in-batch negatives are disabled")]
    MissingNegative(usize),
    #[error("non-finite value while computing instance {instance}: {what}")]
    NonFinite { instance: usize, what: &'static str },
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
}

/// A query (with its instruction), one positive and any number of negatives.
#[derive(Debug, Clone)]
pub struct ContrastiveInstance<'a> {
    pub instruction: &'a str,
    pub query: &'a str,
    pub positive: &'a str,
    pub negatives: Vec<&'a str>,
}

/// Contrastive loss given precomputed similarities.
///
/// Evaluated as `log1p(Σ exp(l_j − l⁺))` when the positive logit dominates,
/// which keeps the result strictly positive even when negatives are far away.
pub fn loss_from_similarities(s_pos: f64, s_neg: &[f64], temperature: f64) -> f64 {
    loss_from_logits(s_pos / temperature, s_neg.iter().map(|s| s / temperature))
}

fn loss_from_logits(l_pos: f64, l_neg: impl Iterator<Item = f64> + Clone) -> f64 {
    let m_neg = l_neg.clone().fold(f64::NEG_INFINITY, f64::max);
    if l_pos >= m_neg {
        l_neg.map(|l| (l - l_pos).exp()).sum::<f64>().ln_1p()
    } else {
        let tail: f64 = l_neg.map(|l| (l - m_neg).exp()).sum::<f64>() + (l_pos - m_neg).exp();
        (m_neg - l_pos) + tail.ln()
    }
}

/// Loss of a single instance under `params`.
pub fn contrastive_loss(
    params: &EmbedderParams,
    instance: &ContrastiveInstance<'_>,
    temperature: f64,
) -> Result<f64, TrainError> {
    if instance.negatives.is_empty() {
        return Err(TrainError::EmptyNegatives);
    }
    let q = params.project(&params.featurize(&params.effective_text(instance.instruction, instance.query)));
    let p = params.project(&params.featurize(instance.positive));
    let s_pos = crate::embedder::cosine(&q, &p);
    let s_neg: Vec<f64> = instance
        .negatives
        .iter()
        .map(|n| crate::embedder::cosine(&q, &params.project(&params.featurize(n))))
        .collect();
    let loss = loss_from_similarities(s_pos, &s_neg, temperature);
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            instance: 0,
            what: "loss",
        });
    }
    Ok(loss)
}

/// Mean batch loss together with its gradient w.r.t. the projection matrix
/// (row-major, same shape as [`EmbedderParams::projection`]).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// Indexes into a feature table: query, positive, negatives.
#[derive(Debug, Clone)]
struct PlanItem {
    query: usize,
    positive: usize,
    negatives: Vec<usize>,
}

/// Loss and (optionally) gradient for items referencing `table`.
///
/// `logit_scale` multiplies similarities before the softmax (`1/τ`).
fn plan_loss_and_grad(
    params: &EmbedderParams,
    table: &[SparseFeatures],
    items: &[PlanItem],
    logit_scale: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>), TrainError> {
    if items.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let dim = params.dim();

    // embed every referenced text once
    let mut local: BTreeMap<usize, usize> = BTreeMap::new();
    for it in items {
        for idx in std::iter::once(it.query).chain(std::iter::once(it.positive)).chain(it.negatives.iter().copied()) {
            let next = local.len();
            local.entry(idx).or_insert(next);
        }
    }
    let mut order = vec![0usize; local.len()];
    for (&global, &l) in &local {
        order[l] = global;
    }
    let emb: Vec<Vec<f64>> = order.iter().map(|&g| params.project(&table[g])).collect();
    let norms: Vec<f64> = emb.iter().map(|e| e.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut d_emb = vec![vec![0.0; dim]; emb.len()];

    let mut total = 0.0;
    for (i, it) in items.iter().enumerate() {
        if it.negatives.is_empty() {
            return Err(TrainError::EmptyNegatives);
        }
        let q = local[&it.query];
        let cands: Vec<usize> = std::iter::once(it.positive)
            .chain(it.negatives.iter().copied())
            .map(|g| local[&g])
            .collect();
        let sims: Vec<f64> = cands
            .iter()
            .map(|&c| {
                if norms[q] == 0.0 || norms[c] == 0.0 {
                    0.0
                } else {
                    dot(&emb[q], &emb[c]) / (norms[q] * norms[c])
                }
            })
            .collect();
        let logits: Vec<f64> = sims.iter().map(|s| s * logit_scale).collect();
        let loss = loss_from_logits(logits[0], logits[1..].iter().copied());
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { instance: i, what: "loss" });
        }
        total += loss;
        if !want_grad {
            continue;
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, &c) in cands.iter().enumerate() {
            let weight = exps[j] / z;
            let g = if j == 0 { weight - 1.0 } else { weight } * logit_scale;
            if g == 0.0 || norms[q] == 0.0 || norms[c] == 0.0 {
                continue;
            }
            let s = sims[j];
            // ∂s/∂a = (b̂ − s·â) / ‖a‖
            for k in 0..dim {
                let qh = emb[q][k] / norms[q];
                let ch = emb[c][k] / norms[c];
                d_emb[q][k] += g * (ch - s * qh) / norms[q];
                d_emb[c][k] += g * (qh - s * ch) / norms[c];
            }
        }
        if d_emb[q].iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite { instance: i, what: "gradient" });
        }
    }
    let n = items.len() as f64;
    let mean = total / n;
    if !want_grad {
        return Ok((mean, None));
    }

    let mut grad = vec![0.0; params.projection().len()];
    for (l, &g) in order.iter().enumerate() {
        let de = &d_emb[l];
        if de.iter().all(|v| *v == 0.0) {
            continue;
        }
        for &(b, w) in table[g].entries() {
            let row = &mut grad[b as usize * dim..(b as usize + 1) * dim];
            for (r, d) in row.iter_mut().zip(de) {
                *r += w * d / n;
            }
        }
    }
    Ok((mean, Some(grad)))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn plan_batch(params: &EmbedderParams, batch: &[ContrastiveInstance<'_>]) -> (Vec<SparseFeatures>, Vec<PlanItem>) {
    let mut table = Vec::new();
    let mut items = Vec::with_capacity(batch.len());
    for inst in batch {
        let query = table.len();
        table.push(params.featurize(&params.effective_text(inst.instruction, inst.query)));
        let positive = table.len();
        table.push(params.featurize(inst.positive));
        let negatives = inst
            .negatives
            .iter()
            .map(|n| {
                table.push(params.featurize(n));
                table.len() - 1
            })
            .collect();
        items.push(PlanItem {
            query,
            positive,
            negatives,
        });
    }
    (table, items)
}

/// Mean loss over a batch.
pub fn batch_loss(
    params: &EmbedderParams,
    batch: &[ContrastiveInstance<'_>],
    temperature: f64,
) -> Result<f64, TrainError> {
    let (table, items) = plan_batch(params, batch);
    plan_loss_and_grad(params, &table, &items, 1.0 / temperature, false).map(|(l, _)| l)
}

/// Analytic gradient of the mean batch loss at temperature `temperature`.
pub fn loss_gradient(
    params: &EmbedderParams,
    batch: &[ContrastiveInstance<'_>],
    temperature: f64,
) -> Result<LossGradient, TrainError> {
    loss_gradient_scaled(params, batch, 1.0 / temperature)
}

/// Same as [`loss_gradient`] but parameterized directly by the factor applied
/// to similarities before the softmax.
pub fn loss_gradient_scaled(
    params: &EmbedderParams,
    batch: &[ContrastiveInstance<'_>],
    logit_scale: f64,
) -> Result<LossGradient, TrainError> {
    let (table, items) = plan_batch(params, batch);
    let (loss, grad) = plan_loss_and_grad(params, &table, &items, logit_scale, true)?;
    Ok(LossGradient {
        loss,
        gradient: grad.expect("gradient requested"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    /// Gradient descent with decoupled weight decay.
    Sgd,
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adamw() -> Self {
        Optimizer::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub temperature: f64,
    /// Cap on the total number of negatives (explicit plus in-batch) per instance.
    pub negatives_per_example: usize,
    pub in_batch_negatives: bool,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-2,
            warmup_steps: 100,
            weight_decay: 0.1,
            epochs: 1,
            temperature: 1.0,
            negatives_per_example: 64,
            in_batch_negatives: true,
            seed: 0,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    /// Commonly used low-temperature preset.
    pub fn low_temperature() -> Self {
        TrainConfig {
            temperature: 0.05,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be > 0");
        }
        if self.batch_size == 0 || (self.in_batch_negatives && self.batch_size < 2) {
            return bad("batch_size must be >= 1 (>= 2 with in-batch negatives)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0");
        }
        // decay multiplies weights by (1 - lr * wd) each step
        if self.learning_rate * self.weight_decay >= 1.0 {
            return bad("learning_rate * weight_decay must be < 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.negatives_per_example == 0 {
            return bad("negatives_per_example must be >= 1");
        }
        Ok(())
    }

    fn learning_rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub loss_curve: Vec<(usize, f64)>,
    pub final_params: EmbedderParams,
    pub examples_seen: usize,
    pub wall_time_ms: u64,
}

/// Serializable part of a [`TrainReport`] (the parameters go to a checkpoint).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub loss_curve: Vec<(usize, f64)>,
    pub examples_seen: usize,
    pub wall_time_ms: u64,
}

impl TrainReport {
    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            loss_curve: self.loss_curve.clone(),
            examples_seen: self.examples_seen,
            wall_time_ms: self.wall_time_ms,
        }
    }

    pub fn initial_loss(&self) -> f64 {
        self.loss_curve[0].1
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_curve[self.loss_curve.len() - 1].1
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Trains `base_params` on `dataset` for `config.epochs` seeded-shuffled epochs.
pub fn train(
    dataset: &Dataset,
    base_params: &EmbedderParams,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !config.in_batch_negatives {
        if let Some(i) = dataset.iter().position(|e| e.negative.is_none()) {
            return Err(TrainError::MissingNegative(i));
        }
    }
    let start = Instant::now();
    let mut params = base_params.clone();

    // feature table: per example [query, positive, negative?]
    let mut table = Vec::with_capacity(dataset.len() * 3);
    let mut slots = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let q = table.len();
        table.push(params.featurize(&params.effective_text(&ex.instruction, &ex.query)));
        let p = table.len();
        table.push(params.featurize(&ex.positive));
        let n = ex.negative.as_ref().map(|n| {
            table.push(params.featurize(n));
            table.len() - 1
        });
        slots.push((q, p, n));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_curve = Vec::new();
    let mut examples_seen = 0;
    let mut step = 0;
    let mut adam = match config.optimizer {
        Optimizer::AdamW { .. } => Some(AdamState {
            m: vec![0.0; params.projection().len()],
            v: vec![0.0; params.projection().len()],
            t: 0,
        }),
        Optimizer::Sgd => None,
    };

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut items = Vec::with_capacity(chunk.len());
            for (pos, &i) in chunk.iter().enumerate() {
                let (q, p, n) = slots[i];
                let mut negatives: Vec<usize> = n.into_iter().collect();
                if config.in_batch_negatives {
                    let own = &dataset.examples()[i].positive;
                    // other positives, starting after this instance and wrapping
                    for off in 1..chunk.len() {
                        if negatives.len() >= config.negatives_per_example {
                            break;
                        }
                        let j = chunk[(pos + off) % chunk.len()];
                        if &dataset.examples()[j].positive != own {
                            negatives.push(slots[j].1);
                        }
                    }
                }
                negatives.truncate(config.negatives_per_example);
                if !negatives.is_empty() {
                    items.push(PlanItem {
                        query: q,
                        positive: p,
                        negatives,
                    });
                }
            }
            if items.is_empty() {
                continue;
            }
            let (loss, grad) = plan_loss_and_grad(&params, &table, &items, 1.0 / config.temperature, true)
                .map_err(|e| match e {
                    TrainError::NonFinite { .. } => TrainError::Diverged { step },
                    other => other,
                })?;
            let grad = grad.expect("gradient requested");
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            loss_curve.push((step, loss));
            examples_seen += items.len();

            let lr = config.learning_rate_at(step);
            let decay = 1.0 - lr * config.weight_decay;
            let proj = params.projection_mut();
            match (&config.optimizer, adam.as_mut()) {
                (Optimizer::AdamW { beta1, beta2, eps }, Some(st)) => {
                    st.t += 1;
                    let bc1 = 1.0 - beta1.powi(st.t);
                    let bc2 = 1.0 - beta2.powi(st.t);
                    for k in 0..proj.len() {
                        let g = grad[k];
                        st.m[k] = beta1 * st.m[k] + (1.0 - beta1) * g;
                        st.v[k] = beta2 * st.v[k] + (1.0 - beta2) * g * g;
                        let mhat = st.m[k] / bc1;
                        let vhat = st.v[k] / bc2;
                        proj[k] = proj[k] * decay - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                _ => {
                    for (p, g) in proj.iter_mut().zip(&grad) {
                        *p = *p * decay - lr * g;
                    }
                }
            }
            if !params.all_finite() {
                return Err(TrainError::Diverged { step });
            }
            step += 1;
        }
    }
    if loss_curve.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    Ok(TrainReport {
        loss_curve,
        final_params: params,
        examples_seen,
        wall_time_ms: start.elapsed().as_millis() as u64,
    })
}

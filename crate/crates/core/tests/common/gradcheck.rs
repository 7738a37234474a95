//! Finite-difference check of the analytic contrastive gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthembed::embedder::{EmbedderParams, FeaturizerConfig, InstructionMode};
use synthembed::trainer::{batch_loss, loss_gradient, ContrastiveInstance};

const WORDS: &[&str] = &[
    "river", "stone", "lamp", "quiet", "orbit", "maple", "signal", "harbor", "violet", "engine", "paper",
    "cloud", "copper", "garden", "winter", "falcon",
];

fn phrase(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// Owned (instruction, query, positive, negatives).
pub type RawInstance = (String, String, String, Vec<String>);

pub fn random_setup(seed: u64) -> (EmbedderParams, Vec<RawInstance>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FeaturizerConfig {
        min_n: 2,
        max_n: 4,
        hash_buckets: 64,
        lowercase: true,
    };
    let params = EmbedderParams::random(cfg, 8, 1.0, seed ^ 0xabc).unwrap();
    let batch = (0..4)
        .map(|_| {
            let negs = (0..rng.random_range(1..4)).map(|_| phrase(&mut rng, 3)).collect();
            (phrase(&mut rng, 2), phrase(&mut rng, 3), phrase(&mut rng, 4), negs)
        })
        .collect();
    (params, batch)
}

pub fn as_instances(raw: &[RawInstance]) -> Vec<ContrastiveInstance<'_>> {
    raw.iter()
        .map(|(i, q, p, n)| ContrastiveInstance {
            instruction: i,
            query: q,
            positive: p,
            negatives: n.iter().map(String::as_str).collect(),
        })
        .collect()
}

/// Central differences over every projection entry.
pub fn finite_difference(params: &EmbedderParams, batch: &[ContrastiveInstance<'_>], tau: f64, h: f64) -> Vec<f64> {
    let base = params.projection().to_vec();
    (0..base.len())
        .map(|k| {
            let mut plus = base.clone();
            plus[k] += h;
            let mut minus = base.clone();
            minus[k] -= h;
            let mk = |p: Vec<f64>| {
                EmbedderParams::new(*params.featurizer(), params.dim(), p, InstructionMode::Prepend).unwrap()
            };
            (batch_loss(&mk(plus), batch, tau).unwrap() - batch_loss(&mk(minus), batch, tau).unwrap()) / (2.0 * h)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-7))
        .fold(0.0, f64::max)
}

/// Temperature used for configuration `seed`.
pub fn tau_for(seed: u64) -> f64 {
    [1.0, 0.5, 0.05][seed as usize % 3]
}

/// Max relative error between analytic and central-difference gradients
/// (step `1e-5`) for configuration `seed`.
pub fn gradient_error(seed: u64) -> f64 {
    let (params, raw) = random_setup(seed);
    let batch = as_instances(&raw);
    let tau = tau_for(seed);
    let analytic = loss_gradient(&params, &batch, tau).unwrap();
    let numeric = finite_difference(&params, &batch, tau, 1e-5);
    max_relative_error(&analytic.gradient, &numeric)
}

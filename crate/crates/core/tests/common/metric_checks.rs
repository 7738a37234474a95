//! Library metrics against the naive references on seeded random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthembed::eval::metrics::{average_precision, ndcg_at_k, spearman, v_measure};

use super::{naive_ap, naive_ndcg, naive_spearman, naive_v_measure};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Instances (of `n`) where nDCG@10 differs from the reference in any bit.
pub fn ndcg_mismatches(n: u64) -> usize {
    (0..n)
        .filter(|&seed| {
            let mut r = rng(seed);
            let len = r.random_range(1..=25);
            // coarse scores so ties occur
            let scores: Vec<f64> = (0..len).map(|_| r.random_range(0..8) as f64 / 4.0).collect();
            let rel: Vec<u32> = (0..len).map(|_| r.random_range(0..=3)).collect();
            ndcg_at_k(&scores, &rel, 10).to_bits() != naive_ndcg(&scores, &rel, 10).to_bits()
        })
        .count()
}

pub fn ap_mismatches(n: u64) -> usize {
    (0..n)
        .filter(|&seed| {
            let mut r = rng(100 + seed);
            let len = r.random_range(2..=20);
            let scores: Vec<f64> = (0..len).map(|_| r.random_range(0..6) as f64).collect();
            let mut rel: Vec<bool> = (0..len).map(|_| r.random_bool(0.3)).collect();
            rel[0] = true;
            average_precision(&scores, &rel).to_bits() != naive_ap(&scores, &rel).to_bits()
        })
        .count()
}

/// Largest absolute V-measure difference over `n` instances.
pub fn v_measure_worst(n: u64) -> f64 {
    (0..n)
        .map(|seed| {
            let mut r = rng(200 + seed);
            let len = r.random_range(2..=40);
            let gold: Vec<usize> = (0..len).map(|_| r.random_range(0..4)).collect();
            let pred: Vec<usize> = (0..len).map(|_| r.random_range(0..3)).collect();
            (v_measure(&gold, &pred).v_measure - naive_v_measure(&gold, &pred)).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest absolute Spearman difference over `n` instances with non-constant x.
pub fn spearman_worst(n: u64) -> f64 {
    (0..n)
        .filter_map(|seed| {
            let mut r = rng(300 + seed);
            let len = r.random_range(3..=30);
            let x: Vec<f64> = (0..len).map(|_| r.random_range(0..10) as f64).collect();
            let mut y: Vec<f64> = (0..len).map(|_| r.random::<f64>()).collect();
            y[0] = 2.0; // keep y non-constant even for tiny n
            if x.iter().all(|v| *v == x[0]) {
                return None;
            }
            Some((spearman(&x, &y) - naive_spearman(&x, &y)).abs())
        })
        .fold(0.0, f64::max)
}

/// Single relevant document at rank 2 of 30.
pub fn ndcg_rank_two() -> f64 {
    let scores: Vec<f64> = (0..30).map(|i| -(i as f64)).collect();
    let mut rel = vec![0u32; 30];
    rel[1] = 1;
    ndcg_at_k(&scores, &rel, 10)
}

/// Relevant documents at ranks 1 and 4 of 5: (library, reference).
pub fn ap_ranks_one_and_four() -> (f64, f64) {
    let scores = [5.0, 4.0, 3.0, 2.0, 1.0];
    let rel = [true, false, false, true, false];
    (average_precision(&scores, &rel), naive_ap(&scores, &rel))
}

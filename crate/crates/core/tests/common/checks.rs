//! Seeded measurements over synthetic grids; tests assert on them and the
//! acceptance harness reports them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use synthembed::influence::{influence, InfluenceMatrix, Metric, TTestKind, DEFAULT_ALPHA};

use super::{brute_force_influence, grid_factors, synthetic_runs};

fn grid_values(factors: usize, per_mask: impl FnMut(usize) -> f64) -> Vec<f64> {
    (0..1usize << factors).map(per_mask).collect()
}

/// Random grids with k in {2, 3, 4}: number of (grid, category) cells where
/// `influence` differs from the partition oracle in any bit.
pub fn oracle_mismatches(grids: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut cells, mut mismatches) = (0, 0);
    for _ in 0..grids {
        let k = rng.random_range(2..=4);
        let factors = grid_factors(k);
        let raw = grid_values(k, |_| rng.random::<f64>());
        let runs = synthetic_runs(&factors, &raw.iter().map(|v| vec![*v]).collect::<Vec<_>>());
        let points: Vec<f64> = raw.iter().map(|v| v * 100.0).collect();
        for (bit, c) in factors.iter().enumerate() {
            cells += 1;
            let est = influence(&runs, *c, &Metric::Task("m0".into()), DEFAULT_ALPHA).unwrap();
            if est.influence.to_bits() != brute_force_influence(&points, bit).to_bits() {
                mismatches += 1;
            }
        }
    }
    (cells, mismatches)
}

/// Per-category planted effects in points on a noise-free 2^k grid.
pub fn additive_scores(deltas: &[f64], base: f64, noise: Option<(f64, &mut ChaCha8Rng)>) -> Vec<f64> {
    let mut noise = noise;
    grid_values(deltas.len(), |mask| {
        let mut v = base;
        for (i, d) in deltas.iter().enumerate() {
            if mask & (1 << i) != 0 {
                v += d;
            }
        }
        if let Some((sigma, rng)) = noise.as_mut() {
            v += Normal::new(0.0, *sigma).unwrap().sample(*rng);
        }
        v
    })
}

/// Influence estimates (points) recovered from a noise-free additive grid.
pub fn recovered_effects(deltas: &[f64]) -> Vec<f64> {
    let factors = grid_factors(deltas.len());
    let points = additive_scores(deltas, 50.0, None);
    let runs = synthetic_runs(&factors, &points.iter().map(|p| vec![p / 100.0]).collect::<Vec<_>>());
    factors
        .iter()
        .map(|c| influence(&runs, *c, &Metric::Task("m0".into()), DEFAULT_ALPHA).unwrap().influence)
        .collect()
}

/// Of `reps` seeded noisy grids, how often the effect of factor `target`
/// is flagged significant.
pub fn detections(deltas: &[f64], target: usize, sigma: f64, reps: usize, seed: u64) -> usize {
    let factors = grid_factors(deltas.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..reps)
        .filter(|_| {
            let points = additive_scores(deltas, 50.0, Some((sigma, &mut rng)));
            let runs = synthetic_runs(&factors, &points.iter().map(|p| vec![p / 100.0]).collect::<Vec<_>>());
            influence(&runs, factors[target], &Metric::Task("m0".into()), DEFAULT_ALPHA).unwrap().significant
        })
        .count()
}

/// Per-cell false-positive rates for `k` null factors and `metrics` metrics
/// over `grids` grids of i.i.d. Gaussian scores.
pub fn null_false_positive_rates(k: usize, metrics: usize, grids: usize, seed: u64) -> Vec<Vec<f64>> {
    let factors = grid_factors(k);
    let names: Vec<Metric> = (0..metrics).map(|j| Metric::Task(format!("m{j}"))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.5, 0.05).unwrap();
    let mut hits = vec![vec![0usize; metrics]; k];
    for _ in 0..grids {
        let per_mask: Vec<Vec<f64>> =
            (0..1usize << k).map(|_| (0..metrics).map(|_| normal.sample(&mut rng)).collect()).collect();
        let runs = synthetic_runs(&factors, &per_mask);
        let m = InfluenceMatrix::compute(&runs, &factors, &names, DEFAULT_ALPHA, TTestKind::Student).unwrap();
        for (i, row) in m.cells.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                hits[i][j] += cell.significant as usize;
            }
        }
    }
    hits.into_iter()
        .map(|row| row.into_iter().map(|h| h as f64 / grids as f64).collect())
        .collect()
}

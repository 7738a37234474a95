//! Lloyd's k-means with k-means++ seeding and best-of-n restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct KMeans {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KMeans {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeans {
            k,
            restarts: 10,
            max_iter: 300,
            seed,
        }
    }

    fn seed_centers(&self, points: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
        let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
        while centers.len() < self.k {
            let total: f64 = d2.iter().sum();
            let next = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut chosen = points.len() - 1;
                for (i, &w) in d2.iter().enumerate() {
                    if w > 0.0 && target < w {
                        chosen = i;
                        break;
                    }
                    target -= w;
                }
                chosen
            } else {
                rng.random_range(0..points.len())
            };
            centers.push(points[next].clone());
            for (d, p) in d2.iter_mut().zip(points) {
                *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
            }
        }
        centers
    }

    fn lloyd(&self, points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> Clustering {
        let dim = points[0].len();
        let mut assignments = vec![usize::MAX; points.len()];
        for _ in 0..self.max_iter {
            let mut changed = false;
            for (a, p) in assignments.iter_mut().zip(points) {
                let best = nearest(p, &centers).0;
                if *a != best {
                    *a = best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = vec![vec![0.0; dim]; self.k];
            let mut counts = vec![0usize; self.k];
            for (&a, p) in assignments.iter().zip(points) {
                counts[a] += 1;
                for (s, v) in sums[a].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for c in 0..self.k {
                // empty clusters keep their previous center
                if counts[c] > 0 {
                    centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
        }
        let inertia = points.iter().zip(&assignments).map(|(p, &a)| sq_dist(p, &centers[a])).sum();
        Clustering { assignments, inertia }
    }

    /// Best clustering (lowest inertia, earliest restart on ties).
    pub fn fit(&self, points: &[Vec<f64>]) -> Clustering {
        assert!(self.k >= 1 && points.len() >= self.k);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut best: Option<Clustering> = None;
        for _ in 0..self.restarts.max(1) {
            let centers = self.seed_centers(points, &mut rng);
            let run = self.lloyd(points, centers);
            if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
                best = Some(run);
            }
        }
        best.expect("at least one restart")
    }
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

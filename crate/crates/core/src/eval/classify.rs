//! L2-regularized multinomial logistic regression, full-batch gradient descent.

/// Fixed-iteration softmax regression on standardized features.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    pub l2: f64,
    pub iterations: usize,
}

impl Default for LogisticRegression {
    fn default() -> Self {
        LogisticRegression {
            l2: 1.0,
            iterations: 500,
        }
    }
}

/// A fitted model: per-class weight rows over standardized features plus bias.
#[derive(Debug, Clone)]
pub struct FittedClassifier {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

impl LogisticRegression {
    /// Fits on `x` (rows) with labels in `0..n_classes`.
    pub fn fit(&self, x: &[Vec<f64>], y: &[usize], n_classes: usize) -> FittedClassifier {
        let n = x.len();
        let d = x[0].len();
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for j in 0..d {
                scale[j] += (row[j] - mean[j]).powi(2) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|row| {
                let mut r: Vec<f64> = (0..d).map(|j| (row[j] - mean[j]) / scale[j]).collect();
                r.push(1.0);
                r
            })
            .collect();

        let mean_sq = z.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n as f64;
        let lipschitz = 0.5 * mean_sq + self.l2 / n as f64;
        let step = 1.0 / lipschitz;

        let mut w = vec![vec![0.0; d + 1]; n_classes];
        let mut grad = vec![vec![0.0; d + 1]; n_classes];
        let mut probs = vec![0.0; n_classes];
        for _ in 0..self.iterations {
            grad.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
            for (row, &label) in z.iter().zip(y) {
                softmax_into(&w, row, &mut probs);
                for c in 0..n_classes {
                    let coef = (probs[c] - if c == label { 1.0 } else { 0.0 }) / n as f64;
                    for (g, v) in grad[c].iter_mut().zip(row) {
                        *g += coef * v;
                    }
                }
            }
            for c in 0..n_classes {
                for j in 0..=d {
                    let reg = if j < d { self.l2 / n as f64 * w[c][j] } else { 0.0 };
                    w[c][j] -= step * (grad[c][j] + reg);
                }
            }
        }
        FittedClassifier {
            mean,
            scale,
            weights: w,
        }
    }
}

fn softmax_into(w: &[Vec<f64>], row: &[f64], out: &mut [f64]) {
    for (o, wc) in out.iter_mut().zip(w) {
        *o = wc.iter().zip(row).map(|(a, b)| a * b).sum();
    }
    let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for o in out.iter_mut() {
        *o = (*o - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl FittedClassifier {
    pub fn predict(&self, row: &[f64]) -> usize {
        let d = self.mean.len();
        let mut z: Vec<f64> = (0..d).map(|j| (row[j] - self.mean[j]) / self.scale[j]).collect();
        z.push(1.0);
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (c, wc) in self.weights.iter().enumerate() {
            let s: f64 = wc.iter().zip(&z).map(|(a, b)| a * b).sum();
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        best
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let correct = x.iter().zip(y).filter(|(row, &label)| self.predict(row) == label).count();
        correct as f64 / x.len() as f64
    }
}

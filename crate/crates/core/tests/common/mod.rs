//! Reference implementations written independently of the library, plus
//! builders for synthetic run grids. Shared by the integration tests and
//! the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeMap;

use synthembed::eval::{ScoreTable, TaskCategory};
use synthembed::influence::{ExperimentRun, RunStatus, SubsetId};
use synthembed::model::Category;

/// Positions ordered by descending score, earliest index first among ties,
/// found by repeated selection.
fn selection_order(scores: &[f64]) -> Vec<usize> {
    let mut used = vec![false; scores.len()];
    let mut order = Vec::with_capacity(scores.len());
    for _ in 0..scores.len() {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if !used[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        used[b] = true;
        order.push(b);
    }
    order
}

pub fn naive_ndcg(scores: &[f64], rel: &[u32], k: usize) -> f64 {
    let dcg_of = |rels: Vec<u32>| {
        let mut total = 0.0;
        for (pos, r) in rels.into_iter().take(k).enumerate() {
            let rank = (pos + 1) as f64;
            total += (2f64.powi(r as i32) - 1.0) / (rank + 1.0).log2();
        }
        total
    };
    let ranked: Vec<u32> = selection_order(scores).into_iter().map(|i| rel[i]).collect();
    let mut best = rel.to_vec();
    best.sort_by(|a, b| b.cmp(a));
    let ideal = dcg_of(best);
    if ideal == 0.0 {
        0.0
    } else {
        dcg_of(ranked) / ideal
    }
}

pub fn naive_ap(scores: &[f64], relevant: &[bool]) -> f64 {
    let order = selection_order(scores);
    let total = relevant.iter().filter(|r| **r).count();
    if total == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        if relevant[i] {
            let hits_so_far = order[..=pos].iter().filter(|&&j| relevant[j]).count();
            acc += hits_so_far as f64 / (pos + 1) as f64;
        }
    }
    acc / total as f64
}

/// V-measure through mutual information: h = I/H(C), c = I/H(K).
pub fn naive_v_measure(gold: &[usize], pred: &[usize]) -> f64 {
    let n = gold.len() as f64;
    let classes: Vec<usize> = {
        let mut v = gold.to_vec();
        v.sort();
        v.dedup();
        v
    };
    let clusters: Vec<usize> = {
        let mut v = pred.to_vec();
        v.sort();
        v.dedup();
        v
    };
    let count = |c: Option<usize>, k: Option<usize>| {
        gold.iter()
            .zip(pred)
            .filter(|(g, p)| c.is_none_or(|c| **g == c) && k.is_none_or(|k| **p == k))
            .count() as f64
    };
    let h = |counts: Vec<f64>| -> f64 { counts.into_iter().filter(|c| *c > 0.0).map(|c| -(c / n) * (c / n).ln()).sum() };
    let h_c = h(classes.iter().map(|&c| count(Some(c), None)).collect());
    let h_k = h(clusters.iter().map(|&k| count(None, Some(k))).collect());
    let mut mi = 0.0;
    for &c in &classes {
        for &k in &clusters {
            let nck = count(Some(c), Some(k));
            if nck > 0.0 {
                mi += nck / n * ((n * nck) / (count(Some(c), None) * count(None, Some(k)))).ln();
            }
        }
    }
    let hom = if h_c == 0.0 { 1.0 } else { mi / h_c };
    let com = if h_k == 0.0 { 1.0 } else { mi / h_k };
    if hom + com == 0.0 {
        0.0
    } else {
        2.0 * hom * com / (hom + com)
    }
}

/// Spearman via counting ranks and the covariance formula.
pub fn naive_spearman(x: &[f64], y: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let below = v.iter().filter(|b| *b < a).count() as f64;
                let tied = v.iter().filter(|b| *b == a).count() as f64;
                below + (tied + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Lanczos approximation of ln Γ(x) for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn t_pdf(x: f64, df: f64) -> f64 {
    let ln_norm = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    (ln_norm - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp()
}

/// Two-sided Student-t tail probability by Simpson quadrature of the density.
pub fn quadrature_two_sided_p(t: f64, df: f64) -> f64 {
    let b = t.abs();
    let steps = 20_000;
    let h = b / steps as f64;
    let mut s = t_pdf(0.0, df) + t_pdf(b, df);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * t_pdf(i as f64 * h, df);
    }
    let central = 2.0 * s * h / 3.0;
    1.0 - central
}

/// Textbook pooled-variance two-sample t statistic and degrees of freedom.
pub fn textbook_pooled_t(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ss = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let df = na + nb - 2.0;
    let sp2 = (ss(a, ma) + ss(b, mb)) / df;
    ((ma - mb) / (sp2 * (1.0 / na + 1.0 / nb)).sqrt(), df)
}

/// Literal partition oracle: mean over runs whose mask includes bit `bit`
/// minus mean over the rest.
pub fn brute_force_influence(values: &[f64], bit: usize) -> f64 {
    let (mut plus, mut minus) = (Vec::new(), Vec::new());
    for (mask, v) in values.iter().enumerate() {
        if mask & (1 << bit) != 0 {
            plus.push(*v);
        } else {
            minus.push(*v);
        }
    }
    plus.iter().sum::<f64>() / plus.len() as f64 - minus.iter().sum::<f64>() / minus.len() as f64
}

pub const GRID_CATEGORIES: [Category; 6] = [
    Category::ShortShort,
    Category::ShortLong,
    Category::LongLong,
    Category::LongShort,
    Category::Bitext,
    Category::Sts,
];

/// The first `k` categories in canonical (sorted) order.
pub fn grid_factors(k: usize) -> Vec<Category> {
    let mut v = GRID_CATEGORIES.to_vec();
    v.sort();
    v.truncate(k);
    v
}

/// One done run per mask, each carrying the given metric values (raw
/// scores, so `Metric::points` multiplies by 100) under task ids `m0, m1…`.
pub fn synthetic_runs(factors: &[Category], per_mask: &[Vec<f64>]) -> Vec<ExperimentRun> {
    per_mask
        .iter()
        .enumerate()
        .map(|(mask, values)| {
            let per_task: BTreeMap<String, f64> =
                values.iter().enumerate().map(|(j, v)| (format!("m{j}"), *v)).collect();
            let overall = values.iter().sum::<f64>() / values.len() as f64;
            let mut per_category = BTreeMap::new();
            per_category.insert(TaskCategory::Classification, overall);
            ExperimentRun {
                subset: SubsetId {
                    mask: mask as u32,
                    included: factors.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, c)| *c).collect(),
                },
                seed: 0,
                status: RunStatus::Done,
                scores: Some(ScoreTable {
                    per_task,
                    per_category,
                    overall,
                }),
                checkpoint_path: None,
                final_loss: None,
                error: None,
                input_fingerprint: String::new(),
            }
        })
        .collect()
}

pub mod checks;
pub mod gradcheck;
pub mod metric_checks;
pub mod scripted;

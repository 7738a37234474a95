//! Ranking, clustering and correlation metrics.

use std::collections::BTreeMap;

/// Indices of `scores` sorted by descending score; ties keep input order.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// nDCG@k with gain `2^rel − 1` divided by `log2(rank + 1)`.
///
/// `relevance[i]` is the graded relevance of candidate `i`, ranked by
/// `scores[i]`. Returns 0 when no candidate is relevant.
pub fn ndcg_at_k(scores: &[f64], relevance: &[u32], k: usize) -> f64 {
    debug_assert_eq!(scores.len(), relevance.len());
    let gain = |rel: u32| 2f64.powi(rel as i32) - 1.0;
    let discount = |rank0: usize| ((rank0 + 2) as f64).log2();
    let dcg: f64 = rank_descending(scores)
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, i)| gain(relevance[i]) / discount(r))
        .sum();
    let mut ideal: Vec<u32> = relevance.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal.into_iter().take(k).enumerate().map(|(r, rel)| gain(rel) / discount(r)).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Average precision of a ranking; `relevant[i]` marks positives.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> f64 {
    let total = relevant.iter().filter(|r| **r).count();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, i) in rank_descending(scores).into_iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / total as f64
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Homogeneity, completeness and their harmonic mean (V-measure).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VMeasure {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
}

/// V-measure of a predicted clustering against gold labels.
///
/// Conventions: homogeneity is 1 when there is a single gold class;
/// completeness is 1 when there is a single predicted cluster.
pub fn v_measure(gold: &[usize], predicted: &[usize]) -> VMeasure {
    assert_eq!(gold.len(), predicted.len());
    let n = gold.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_cluster: BTreeMap<usize, usize> = BTreeMap::new();
    for (&c, &k) in gold.iter().zip(predicted) {
        *joint.entry((c, k)).or_default() += 1;
        *by_class.entry(c).or_default() += 1;
        *by_cluster.entry(k).or_default() += 1;
    }
    let h_c = entropy(by_class.values().copied(), n);
    let h_k = entropy(by_cluster.values().copied(), n);
    // H(C|K) = −Σ n_ck/n · ln(n_ck / n_k)
    let mut h_c_given_k = 0.0;
    let mut h_k_given_c = 0.0;
    for (&(c, k), &nck) in &joint {
        let p = nck as f64 / n;
        h_c_given_k -= p * (nck as f64 / by_cluster[&k] as f64).ln();
        h_k_given_c -= p * (nck as f64 / by_class[&c] as f64).ln();
    }
    let homogeneity = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let completeness = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
    let v = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    VMeasure {
        homogeneity,
        completeness,
        v_measure: v,
    }
}

/// 1-based ranks with ties assigned their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

/// Spearman rank correlation (Pearson over average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

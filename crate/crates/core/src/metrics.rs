//! Evaluation metrics and the approximate paired permutation test.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Fraction of samples whose true class is absent from the `k` highest-scoring
/// classes. Score ties are broken toward the lowest class index.
pub fn top_k_error(scores: &[Vec<f64>], labels: &[Vec<f64>], k: usize) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "top_k_error needs matching nonempty score/label matrices, got {} vs {}",
            scores.len(),
            labels.len()
        )));
    }
    let classes = scores[0].len();
    if k == 0 || k > classes {
        return Err(Error::Argument(format!(
            "k = {k} out of range for {classes} classes"
        )));
    }
    let mut wrong = 0usize;
    for (row, label) in scores.iter().zip(labels) {
        let truth = label
            .iter()
            .position(|&v| v == 1.0)
            .ok_or_else(|| Error::Argument("label row is not one-hot".into()))?;
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .expect("scores must be comparable")
                .then(a.cmp(&b))
        });
        if !order[..k].contains(&truth) {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / scores.len() as f64)
}

/// Non-interpolated average precision: rank by descending score (ties by
/// ascending sample index) and average the precision at each positive's rank.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "average_precision needs equal lengths, got {} vs {}",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l == 1.0).count();
    if positives == 0 {
        return Err(Error::Argument(
            "average precision is undefined without positives".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be comparable")
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] == 1.0 {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Per-class average precision plus their unweighted mean. Classes without a
/// single positive are skipped (`None`) and excluded from the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<MapResult> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Argument(
            "mean_average_precision needs matching nonempty matrices".into(),
        ));
    }
    let classes = scores[0].len();
    let mut per_class = Vec::with_capacity(classes);
    let mut sum = 0.0;
    let mut valid = 0usize;
    for c in 0..classes {
        let col_scores: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let col_labels: Vec<f64> = labels.iter().map(|row| row[c]).collect();
        if col_labels.contains(&1.0) {
            let ap = average_precision(&col_scores, &col_labels)?;
            sum += ap;
            valid += 1;
            per_class.push(Some(ap));
        } else {
            per_class.push(None);
        }
    }
    if valid == 0 {
        return Err(Error::Argument(
            "no class has positive labels; mAP undefined".into(),
        ));
    }
    Ok(MapResult {
        per_class,
        mean: sum / valid as f64,
    })
}

/// Sizing of the approximate permutation test: `n = ceil(p (1-p) / sigma_p^2)`
/// permutations bound the standard deviation of the estimated p-value by
/// `sigma_p`, anchored at the worst case `p = 0.5` when p is unknown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub sigma_p: f64,
    pub p_anchor: f64,
    pub seed: u64,
}

impl PermutationConfig {
    pub fn new(sigma_p: f64, p_anchor: f64, seed: u64) -> Result<Self> {
        if sigma_p <= 0.0 {
            return Err(Error::Argument(format!(
                "sigma_p must be positive, got {sigma_p}"
            )));
        }
        if !(0.0..1.0).contains(&p_anchor) || p_anchor == 0.0 {
            return Err(Error::Argument(format!(
                "p_anchor must lie in (0, 1), got {p_anchor}"
            )));
        }
        Ok(Self {
            sigma_p,
            p_anchor,
            seed,
        })
    }
}

pub fn permutation_count(cfg: &PermutationConfig) -> usize {
    (cfg.p_anchor * (1.0 - cfg.p_anchor) / (cfg.sigma_p * cfg.sigma_p)).ceil() as usize
}

/// Result of [`paired_permutation_test`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationOutcome {
    pub statistic: f64,
    pub n: usize,
    pub p_value: f64,
    pub seed: u64,
}

/// Two-sided paired sign-swap permutation test on per-sample correctness.
///
/// The statistic is the absolute error-rate difference. Each of the `n`
/// permutations independently swaps each pair `(a_i, b_i)` with probability
/// 1/2 (keyed by `(seed, permutation, i)`); the p-value is
/// `(1 + #{permuted >= observed}) / (n + 1)` so it can never reach 0 under
/// the Monte-Carlo approximation. Counting happens in integers, so ties with
/// the observed statistic are exact.
pub fn paired_permutation_test(
    correct_a: &[bool],
    correct_b: &[bool],
    cfg: &PermutationConfig,
) -> Result<PermutationOutcome> {
    if correct_a.is_empty() || correct_a.len() != correct_b.len() {
        return Err(Error::Argument(format!(
            "paired test needs nonempty equal-length outcome lists, got {} vs {}",
            correct_a.len(),
            correct_b.len()
        )));
    }
    let len = correct_a.len();
    let n = permutation_count(cfg);
    // Per-pair error difference in {-1, 0, 1}; zero pairs are invariant under
    // swapping and drop out of the statistic.
    let deltas: Vec<(u64, i64)> = correct_a
        .iter()
        .zip(correct_b)
        .enumerate()
        .filter_map(|(i, (&a, &b))| {
            let d = i64::from(!a) - i64::from(!b);
            (d != 0).then_some((i as u64, d))
        })
        .collect();
    let observed: i64 = deltas.iter().map(|&(_, d)| d).sum::<i64>().abs();

    let seed = cfg.seed;
    let exceed = (0..n as u64)
        .into_par_iter()
        .filter(|&perm| {
            let sum: i64 = deltas
                .iter()
                .map(|&(i, d)| {
                    if rng::uniform(seed, &[rng::DOMAIN_PERM, perm, i]) < 0.5 {
                        -d
                    } else {
                        d
                    }
                })
                .sum();
            sum.abs() >= observed
        })
        .count();

    Ok(PermutationOutcome {
        statistic: observed as f64 / len as f64,
        n,
        p_value: (1 + exceed) as f64 / (n + 1) as f64,
        seed,
    })
}

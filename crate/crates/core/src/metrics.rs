//! Text-overlap quality measures: ROUGE-1/2/L, consecutive-repetition rate,
//! the aggregate score over datasets, and Kendall rank correlation.
//!
//! This is a whitespace/token-level ROUGE: "words" here are whatever items
//! the caller passes (token ids in the pipeline, string words in tests). No
//! stemming, no sentence splitting, not bit-compatible with the reference
//! ROUGE packages.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ROUGE-1/2/L F1 scores, each in [0, 100].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

impl MetricTriple {
    pub fn compute<T: Eq + Hash>(candidate: &[T], target: &[T]) -> Self {
        MetricTriple {
            rouge1: rouge_n(candidate, target, 1),
            rouge2: rouge_n(candidate, target, 2),
            rouge_l: rouge_l(candidate, target),
        }
    }

    /// Geometric mean of the three components.
    pub fn geo_mean(&self) -> f64 {
        (self.rouge1 * self.rouge2 * self.rouge_l).cbrt()
    }
}

fn f1_times_100(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        100.0 * 2.0 * precision * recall / (precision + recall)
    }
}

/// N-gram F1 overlap with clipped (multiset) counts, scaled to [0, 100].
/// Returns 0 when either side has no n-grams.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], target: &[T], n: usize) -> f64 {
    assert!(n >= 1, "rouge_n needs n >= 1");
    if candidate.len() < n || target.len() < n {
        return 0.0;
    }
    let mut target_counts: HashMap<&[T], i64> = HashMap::new();
    for gram in target.windows(n) {
        *target_counts.entry(gram).or_insert(0) += 1;
    }
    let mut overlap = 0i64;
    for gram in candidate.windows(n) {
        if let Some(c) = target_counts.get_mut(gram) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let cand_grams = (candidate.len() - n + 1) as f64;
    let tgt_grams = (target.len() - n + 1) as f64;
    f1_times_100(overlap as f64 / cand_grams, overlap as f64 / tgt_grams)
}

/// Longest-common-subsequence F1, scaled to [0, 100].
pub fn rouge_l<T: Eq>(candidate: &[T], target: &[T]) -> f64 {
    if candidate.is_empty() || target.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, target) as f64;
    f1_times_100(lcs / candidate.len() as f64, lcs / target.len() as f64)
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let n = b.len();
    let mut prev = vec![0usize; n + 1];
    let mut cur = vec![0usize; n + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// True if the sequence contains a consecutive repeated n-gram for any
/// n in `1..=max_n`: some `i` with `t[i..i+n] == t[i+n..i+2n]`.
pub fn has_consecutive_repeat<T: Eq>(tokens: &[T], max_n: usize) -> bool {
    for n in 1..=max_n {
        if 2 * n > tokens.len() {
            break;
        }
        for i in 0..=tokens.len() - 2 * n {
            if tokens[i..i + n] == tokens[i + n..i + 2 * n] {
                return true;
            }
        }
    }
    false
}

/// Percentage of outputs containing any consecutive repeated n-gram,
/// n up to `max_n`.
pub fn repetition_rate<S, T>(outputs: &[S], max_n: usize) -> Result<f64>
where
    S: AsRef<[T]>,
    T: Eq,
{
    assert!(max_n >= 1, "repetition_rate needs max_n >= 1");
    if outputs.is_empty() {
        return Err(Error::EmptyInput("repetition_rate outputs"));
    }
    let flagged = outputs
        .iter()
        .filter(|o| has_consecutive_repeat(o.as_ref(), max_n))
        .count();
    Ok(100.0 * flagged as f64 / outputs.len() as f64)
}

/// Aggregate quality over datasets: arithmetic mean of each dataset's
/// geometric-mean ROUGE. A zero component zeroes that dataset's term.
pub fn overall_score(per_dataset: &[MetricTriple]) -> Result<f64> {
    if per_dataset.is_empty() {
        return Err(Error::EmptyInput("overall_score datasets"));
    }
    let sum: f64 = per_dataset.iter().map(|t| t.geo_mean()).sum();
    Ok(sum / per_dataset.len() as f64)
}

/// Kendall rank correlation (tau-b, tie-corrected). `None` when either
/// sequence is constant or fewer than two pairs exist.
pub fn kendall_tau_b(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_x, mut ties_y) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = xs[i].partial_cmp(&xs[j])?;
            let dy = ys[i].partial_cmp(&ys[j])?;
            match (dx, dy) {
                (std::cmp::Ordering::Equal, std::cmp::Ordering::Equal) => {
                    ties_x += 1;
                    ties_y += 1;
                }
                (std::cmp::Ordering::Equal, _) => ties_x += 1,
                (_, std::cmp::Ordering::Equal) => ties_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let total = (n * (n - 1) / 2) as i64;
    let denom = (((total - ties_x) as f64) * ((total - ties_y) as f64)).sqrt();
    if denom == 0.0 {
        return None;
    }
    Some((concordant - discordant) as f64 / denom)
}

//! Latent-space similarity between two sequences.
//!
//! Both sequences are represented as matrices of hidden states (one row per
//! token). Rows are L2-normalized, averaged over spans of n consecutive
//! tokens (then re-normalized), and greedily max-matched between the two
//! sides. Precision averages over candidate spans, recall over target spans,
//! and the harmonic mean F_n is summed over the configured span lengths.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Where sequence representations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationSource {
    /// Decoder output hidden states (context-conditioned).
    DecoderStates,
    /// Raw token embedding rows (context-free ablation).
    TokenEmbeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpanMatchConfig {
    /// Span lengths to match on; lengths exceeding either sequence are
    /// skipped for that pair.
    pub span_lengths: Vec<usize>,
    pub representation_source: RepresentationSource,
}

impl Default for SpanMatchConfig {
    fn default() -> Self {
        SpanMatchConfig {
            span_lengths: vec![1, 2, 4, 8],
            representation_source: RepresentationSource::DecoderStates,
        }
    }
}

impl SpanMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.span_lengths.is_empty() {
            return Err(Error::InvalidConfig("span_lengths must be non-empty".into()));
        }
        if self.span_lengths.iter().any(|&n| n == 0) {
            return Err(Error::InvalidConfig("span_lengths must all be >= 1".into()));
        }
        Ok(())
    }
}

/// Similarity value plus its per-span-length breakdown. Each per-n value
/// lies in [0, 1]; the total is their sum over applicable span lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    /// Sum of `per_n` values over the applicable span lengths.
    pub value: f64,
    pub per_n: BTreeMap<usize, f64>,
}

impl SimilarityScore {
    /// Score for a degenerate (empty) candidate: nothing matches.
    pub fn zero() -> Self {
        SimilarityScore {
            value: 0.0,
            per_n: BTreeMap::new(),
        }
    }
}

fn l2_normalize_rows(m: &Tensor) -> Vec<f64> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = m.data.clone();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let norm = kernels::dot(row, row).sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    out
}

/// Unit-norm span vectors of length n: mean of n consecutive normalized
/// rows, re-normalized. Zero-norm spans stay zero.
fn span_vectors(normalized: &[f64], rows: usize, cols: usize, n: usize) -> Vec<f64> {
    let count = rows + 1 - n;
    let mut out = vec![0.0; count * cols];
    for s in 0..count {
        let dst = &mut out[s * cols..(s + 1) * cols];
        for r in s..s + n {
            let src = &normalized[r * cols..(r + 1) * cols];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        let inv = 1.0 / n as f64;
        for d in dst.iter_mut() {
            *d *= inv;
        }
        let norm = kernels::dot(dst, dst).sqrt();
        if norm > 0.0 {
            for d in dst.iter_mut() {
                *d /= norm;
            }
        }
    }
    out
}

/// Mean over rows of `a` of the best dot product against any row of `b`.
fn mean_best_match(a: &[f64], b: &[f64], cols: usize) -> f64 {
    let na = a.len() / cols;
    let nb = b.len() / cols;
    let mut total = 0.0;
    for i in 0..na {
        let ai = &a[i * cols..(i + 1) * cols];
        let mut best = f64::NEG_INFINITY;
        for j in 0..nb {
            let bj = &b[j * cols..(j + 1) * cols];
            best = best.max(kernels::dot(ai, bj));
        }
        total += best;
    }
    total / na as f64
}

/// Span-matching F-measure between candidate and target state matrices.
pub fn span_similarity(
    candidate: &Tensor,
    target: &Tensor,
    cfg: &SpanMatchConfig,
) -> Result<SimilarityScore> {
    cfg.validate()?;
    if candidate.numel() == 0 || target.numel() == 0 {
        return Err(Error::EmptyInput("span_similarity state matrix"));
    }
    if candidate.cols() != target.cols() {
        return Err(Error::ShapeMismatch {
            op: "span_similarity",
            lhs: candidate.shape.clone(),
            rhs: target.shape.clone(),
        });
    }
    let cols = candidate.cols();
    let (rows_c, rows_t) = (candidate.rows(), target.rows());
    let norm_c = l2_normalize_rows(candidate);
    let norm_t = l2_normalize_rows(target);

    let mut per_n = BTreeMap::new();
    let mut value = 0.0;
    for &n in &cfg.span_lengths {
        if n > rows_c || n > rows_t {
            continue; // skipped, excluded from the sum
        }
        let spans_c = span_vectors(&norm_c, rows_c, cols, n);
        let spans_t = span_vectors(&norm_t, rows_t, cols, n);
        let precision = mean_best_match(&spans_c, &spans_t, cols);
        let recall = mean_best_match(&spans_t, &spans_c, cols);
        // The harmonic mean is only meaningful for positive precision and
        // recall; negative cosines could otherwise blow |F| past 1 through
        // a near-zero denominator. Guarding at <= 0 keeps F in [0, 1] and
        // covers the P + R = 0 case.
        let f = if precision <= 0.0 || recall <= 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_n.insert(n, f);
        value += f;
    }
    Ok(SimilarityScore { value, per_n })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn self_similarity_sums_to_span_count() {
        // 9 rows >= 8, so all four span lengths apply and each F_n = 1.
        let rows = 9;
        let cols = 3;
        let data: Vec<f64> = (0..rows * cols).map(|i| (i as f64 * 0.7).sin() + 0.1).collect();
        let m = mat(rows, cols, data);
        let s = span_similarity(&m, &m, &SpanMatchConfig::default()).unwrap();
        assert_eq!(s.per_n.len(), 4);
        for (&n, &f) in &s.per_n {
            assert!((f - 1.0).abs() < 1e-12, "F_{n} = {f}");
        }
        assert!((s.value - 4.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_rows_score_zero() {
        let c = mat(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let t = mat(2, 4, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let cfg = SpanMatchConfig {
            span_lengths: vec![1],
            ..Default::default()
        };
        let s = span_similarity(&c, &t, &cfg).unwrap();
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn long_spans_skipped_for_short_sequences() {
        let c = mat(3, 2, vec![1.0; 6]);
        let t = mat(5, 2, vec![1.0; 10]);
        let s = span_similarity(&c, &t, &SpanMatchConfig::default()).unwrap();
        // n = 4 exceeds candidate length 3; n = 8 exceeds both.
        assert!(s.per_n.contains_key(&1) && s.per_n.contains_key(&2));
        assert!(!s.per_n.contains_key(&4) && !s.per_n.contains_key(&8));
    }

    #[test]
    fn symmetric_under_swap() {
        let c = mat(4, 3, (0..12).map(|i| (i as f64).cos()).collect());
        let t = mat(6, 3, (0..18).map(|i| (i as f64 * 1.3).sin()).collect());
        let cfg = SpanMatchConfig::default();
        let ab = span_similarity(&c, &t, &cfg).unwrap();
        let ba = span_similarity(&t, &c, &cfg).unwrap();
        assert_eq!(ab.value, ba.value);
    }

    #[test]
    fn invariant_to_positive_row_rescaling() {
        let c = mat(3, 3, (0..9).map(|i| (i as f64).sin() + 0.2).collect());
        let t = mat(4, 3, (0..12).map(|i| (i as f64 * 0.9).cos()).collect());
        let cfg = SpanMatchConfig::default();
        let base = span_similarity(&c, &t, &cfg).unwrap();
        let mut scaled = c.clone();
        let factors = [3.0, 0.25, 17.5];
        for (r, f) in factors.iter().enumerate() {
            for j in 0..3 {
                scaled.data[r * 3 + j] *= f;
            }
        }
        let re = span_similarity(&scaled, &t, &cfg).unwrap();
        assert_eq!(base.value, re.value);
    }

    #[test]
    fn width_mismatch_and_empty_rejected() {
        let c = mat(2, 3, vec![1.0; 6]);
        let t = mat(2, 4, vec![1.0; 8]);
        assert!(span_similarity(&c, &t, &SpanMatchConfig::default()).is_err());
        let empty = Tensor::zeros(vec![0, 3]);
        assert!(span_similarity(&empty, &c, &SpanMatchConfig::default()).is_err());
    }
}

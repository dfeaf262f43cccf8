//! Shared oracles and helpers for the integration suites. Everything here
//! is deliberately independent of the library's implementation paths: brute
//! force, enumeration, and finite differences only.

#![allow(dead_code)]

use seqcal_core::model::{Model, ModelConfig};
use seqcal_core::tokens::EOS_ID;
use seqcal_core::Tensor;

/// Relative error with an absolute floor of 1: |a-b| / max(1, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central finite difference of `f` along coordinate `i`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

pub fn micro_model_config(vocab_size: u32, d_model: usize, num_heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        num_enc_layers: 1,
        num_dec_layers: 1,
        d_model,
        num_heads,
        d_ff: d_model * 2,
        max_enc_len: 6,
        max_dec_len: 6,
        ..Default::default()
    }
}

pub fn micro_model(vocab_size: u32, d_model: usize, num_heads: usize, seed: u64) -> Model {
    Model::init(micro_model_config(vocab_size, d_model, num_heads), seed).unwrap()
}

/// Every legal candidate sequence up to `max_len`: either some non-EOS
/// tokens followed by EOS, or exactly `max_len` non-EOS tokens.
pub fn enumerate_candidate_space(non_eos_tokens: &[u32], max_len: usize) -> Vec<Vec<u32>> {
    let mut prefixes: Vec<Vec<u32>> = vec![Vec::new()];
    let mut out = Vec::new();
    for len in 0..=max_len {
        let mut next = Vec::new();
        for p in &prefixes {
            debug_assert_eq!(p.len(), len);
            if len < max_len {
                let mut fin = p.clone();
                fin.push(EOS_ID);
                out.push(fin);
                for &t in non_eos_tokens {
                    let mut q = p.clone();
                    q.push(t);
                    next.push(q);
                }
            } else {
                out.push(p.clone());
            }
        }
        prefixes = next;
    }
    out
}

/// Brute-force span-matching similarity, written as the flattest possible
/// double loop for use as an oracle.
pub fn brute_force_span_similarity(cand: &Tensor, tgt: &Tensor, span_lengths: &[usize]) -> f64 {
    let d = cand.cols();
    assert_eq!(d, tgt.cols());
    let norm_rows = |m: &Tensor| -> Vec<Vec<f64>> {
        (0..m.rows())
            .map(|r| {
                let row: Vec<f64> = m.row(r).to_vec();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter().map(|v| v / norm).collect()
                } else {
                    row
                }
            })
            .collect()
    };
    let spans = |rows: &[Vec<f64>], n: usize| -> Vec<Vec<f64>> {
        (0..=rows.len() - n)
            .map(|start| {
                let mut acc = vec![0.0; d];
                for row in rows.iter().skip(start).take(n) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                for a in acc.iter_mut() {
                    *a /= n as f64;
                }
                let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for a in acc.iter_mut() {
                        *a /= norm;
                    }
                }
                acc
            })
            .collect()
    };
    let avg_max = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        let mut total = 0.0;
        for va in a {
            let mut best = f64::NEG_INFINITY;
            for vb in b {
                let dp: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
                if dp > best {
                    best = dp;
                }
            }
            total += best;
        }
        total / a.len() as f64
    };
    let rows_c = norm_rows(cand);
    let rows_t = norm_rows(tgt);
    let mut value = 0.0;
    for &n in span_lengths {
        if n > rows_c.len() || n > rows_t.len() {
            continue;
        }
        let sc = spans(&rows_c, n);
        let st = spans(&rows_t, n);
        let p = avg_max(&sc, &st);
        let r = avg_max(&st, &sc);
        if p > 0.0 && r > 0.0 {
            value += 2.0 * p * r / (p + r);
        }
    }
    value
}

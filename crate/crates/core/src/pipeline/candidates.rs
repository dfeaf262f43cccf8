//! Stage 2: decode candidate sets from the fine-tuned model and label them.
//!
//! The candidate cache is line-delimited JSON, one record per example:
//!
//! ```json
//! {"example_id":0,"context_ids":[..],"target_ids":[..],
//!  "checkpoint_id":"<sha256 of the checkpoint file>",
//!  "decode_config":{..},"span_config":{..},
//!  "candidates":[{"token_ids":[..],"ft_log_prob":-1.25,
//!                 "span_similarity":{"value":3.9,"per_n":{"1":0.99,..}},
//!                 "rouge":{"rouge1":100.0,"rouge2":100.0,"rouge_l":100.0}}]}
//! ```
//!
//! `span_config` rides along so a reader can recompute every stored
//! similarity from the tokens plus the named checkpoint, with no side
//! channel. `checkpoint_id` chains the cache to the exact parameters that
//! produced it; the calibrate stage refuses mismatches.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationExample, CandidateRecord};
use crate::data::Example;
use crate::decode::{decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricTriple;
use crate::model::{infer, load_checkpoint, Model};
use crate::seeding::derive_seed;
use crate::similarity::{SimilarityScore, SpanMatchConfig};
use crate::tokens::TokenSeq;

use super::quality::{candidate_similarity, representation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheCandidate {
    pub token_ids: TokenSeq,
    pub ft_log_prob: f64,
    pub span_similarity: SimilarityScore,
    pub rouge: MetricTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub example_id: u64,
    pub context_ids: TokenSeq,
    pub target_ids: TokenSeq,
    pub checkpoint_id: String,
    pub decode_config: DecodeConfig,
    pub span_config: SpanMatchConfig,
    pub candidates: Vec<CacheCandidate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeCandidatesReport {
    pub num_examples: usize,
    pub total_candidates: usize,
    /// Examples whose deduplicated candidate set came up short of m.
    pub short_sets: usize,
    pub checkpoint_id: String,
}

fn build_record(
    model: &Model,
    example: &Example,
    checkpoint_id: &str,
    decode_cfg: &DecodeConfig,
    span_cfg: &SpanMatchConfig,
) -> Result<CacheRecord> {
    let cfg_ex = DecodeConfig {
        seed: derive_seed(decode_cfg.seed, &[example.id]),
        ..decode_cfg.clone()
    };
    let mut cands = decode(model, &example.context, &cfg_ex)?;
    // distinct token sequences only; the list is ranked, so keep the first
    // (best-scored) instance of each
    let mut distinct: Vec<crate::decode::ScoredCandidate> = Vec::with_capacity(cands.len());
    for c in cands.drain(..) {
        if !distinct.iter().any(|d| d.tokens == c.tokens) {
            distinct.push(c);
        }
    }

    let ctx = infer::encode_ctx(model, &example.context)?;
    let target_repr = representation(model, &ctx, &example.target, span_cfg)?;
    let mut out = Vec::with_capacity(distinct.len());
    for c in &distinct {
        let sim = candidate_similarity(model, &ctx, &c.tokens, target_repr.as_ref(), span_cfg)?;
        let rouge = MetricTriple::compute(c.tokens.content(), example.target.content());
        out.push(CacheCandidate {
            token_ids: c.tokens.clone(),
            ft_log_prob: c.log_prob,
            span_similarity: sim,
            rouge,
        });
    }
    Ok(CacheRecord {
        example_id: example.id,
        context_ids: example.context.clone(),
        target_ids: example.target.clone(),
        checkpoint_id: checkpoint_id.to_string(),
        decode_config: cfg_ex,
        span_config: span_cfg.clone(),
        candidates: out,
    })
}

/// Decode, label, and cache candidate sets for every example. Refuses to
/// overwrite an existing cache unless asked.
pub fn run_decode_candidates(
    ckpt_path: &Path,
    examples: &[Example],
    decode_cfg: &DecodeConfig,
    span_cfg: &SpanMatchConfig,
    out_path: &Path,
    overwrite: bool,
) -> Result<DecodeCandidatesReport> {
    if out_path.exists() && !overwrite {
        return Err(Error::WouldOverwrite(out_path.display().to_string()));
    }
    decode_cfg.validate()?;
    span_cfg.validate()?;
    let (ckpt, checkpoint_id) = load_checkpoint(ckpt_path)?;
    let model = ckpt.to_model();

    let records: Vec<Result<CacheRecord>> = examples
        .par_iter()
        .map(|ex| build_record(&model, ex, &checkpoint_id, decode_cfg, span_cfg))
        .collect();

    if let Some(dir) = out_path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(out_path)?);
    let mut total_candidates = 0usize;
    let mut short_sets = 0usize;
    let mut written = 0usize;
    for rec in records {
        let rec = rec?;
        total_candidates += rec.candidates.len();
        short_sets += (rec.candidates.len() < decode_cfg.num_candidates) as usize;
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
        written += 1;
    }
    w.flush()?;
    Ok(DecodeCandidatesReport {
        num_examples: written,
        total_candidates,
        short_sets,
        checkpoint_id,
    })
}

pub fn read_cache(path: &Path) -> Result<Vec<CacheRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Cache records as calibration examples.
pub fn cache_to_examples(records: &[CacheRecord]) -> Vec<CalibrationExample> {
    records
        .iter()
        .map(|r| CalibrationExample {
            context: r.context_ids.clone(),
            target: r.target_ids.clone(),
            candidates: r
                .candidates
                .iter()
                .map(|c| CandidateRecord {
                    tokens: c.token_ids.clone(),
                    ft_log_prob: c.ft_log_prob,
                    similarity: c.span_similarity.clone(),
                    aux_rouge: Some(c.rouge),
                })
                .collect(),
        })
        .collect()
}

//! Decode-and-score helpers shared by the training and evaluation stages.

use rayon::prelude::*;

use crate::data::Example;
use crate::decode::{decode, select_best, DecodeConfig, ScoredCandidate};
use crate::error::Result;
use crate::metrics::{has_consecutive_repeat, kendall_tau_b, MetricTriple};
use crate::model::{infer, Model};
use crate::seeding::derive_seed;
use crate::similarity::{
    span_similarity, RepresentationSource, SimilarityScore, SpanMatchConfig,
};
use crate::tensor::Tensor;
use crate::tokens::TokenSeq;

/// Repetition window for rep% throughout the pipeline.
pub const REP_MAX_N: usize = 4;

/// Decode every example (per-example derived seeds) and keep the selected
/// best candidate. Returns (selected outputs, per-example metric means).
pub fn decode_select_and_score(
    model: &Model,
    examples: &[Example],
    cfg: &DecodeConfig,
) -> Result<ScoredOutputs> {
    let picks: Vec<Result<ScoredCandidate>> = examples
        .par_iter()
        .map(|ex| {
            let cfg_ex = DecodeConfig {
                seed: derive_seed(cfg.seed, &[ex.id]),
                ..cfg.clone()
            };
            let cands = decode(model, &ex.context, &cfg_ex)?;
            Ok(select_best(&cands)?.clone())
        })
        .collect();

    let mut outputs = Vec::with_capacity(examples.len());
    let mut triple_sum = (0.0, 0.0, 0.0);
    let mut flagged = 0usize;
    for (ex, pick) in examples.iter().zip(picks) {
        let pick = pick?;
        let content = pick.tokens.content();
        let t = MetricTriple::compute(content, ex.target.content());
        triple_sum.0 += t.rouge1;
        triple_sum.1 += t.rouge2;
        triple_sum.2 += t.rouge_l;
        flagged += has_consecutive_repeat(content, REP_MAX_N) as usize;
        outputs.push(pick);
    }
    let n = examples.len() as f64;
    Ok(ScoredOutputs {
        outputs,
        rouge: MetricTriple {
            rouge1: triple_sum.0 / n,
            rouge2: triple_sum.1 / n,
            rouge_l: triple_sum.2 / n,
        },
        rep_pct: 100.0 * flagged as f64 / n,
    })
}

pub struct ScoredOutputs {
    pub outputs: Vec<ScoredCandidate>,
    /// Mean of per-example ROUGE triples.
    pub rouge: MetricTriple,
    /// Share of outputs with a consecutive repeated n-gram, n ≤ 4.
    pub rep_pct: f64,
}

/// Teacher-forced argmax accuracy over target positions (EOS included).
pub fn token_accuracy(model: &Model, examples: &[Example]) -> Result<f64> {
    let counts: Vec<Result<(usize, usize)>> = examples
        .par_iter()
        .map(|ex| {
            let y = ex.target.with_eos();
            let rows = infer::teacher_forced_nograd(model, &ex.context, &y)?;
            let mut hits = 0usize;
            for (t, &tok) in y.ids().iter().enumerate() {
                let row = &rows.log_prob_rows[t];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                hits += (argmax == tok as usize) as usize;
            }
            Ok((hits, y.len()))
        })
        .collect();
    let mut hits = 0usize;
    let mut total = 0usize;
    for c in counts {
        let (h, t) = c?;
        hits += h;
        total += t;
    }
    Ok(hits as f64 / total as f64)
}

/// Sequence representation for similarity scoring, per the configured
/// source. `None` when the candidate has no content tokens.
pub fn representation(
    model: &Model,
    ctx: &infer::EncodedContext,
    seq: &TokenSeq,
    span_cfg: &SpanMatchConfig,
) -> Result<Option<Tensor>> {
    let content = seq.content();
    if content.is_empty() {
        return Ok(None);
    }
    match span_cfg.representation_source {
        RepresentationSource::DecoderStates => {
            let rows =
                infer::teacher_forced_with_ctx(model, ctx, &TokenSeq::new(content.to_vec()))?;
            Ok(Some(rows.states))
        }
        RepresentationSource::TokenEmbeddings => {
            let (shape, table) = model.params.get("embed.tok");
            let d = shape[1];
            let mut data = Vec::with_capacity(content.len() * d);
            for &t in content {
                data.extend_from_slice(&table[t as usize * d..(t as usize + 1) * d]);
            }
            Ok(Some(Tensor::new(vec![content.len(), d], data)?))
        }
    }
}

/// Span similarity of a candidate against the target under `model`'s
/// representations; zero when either side is empty.
pub fn candidate_similarity(
    model: &Model,
    ctx: &infer::EncodedContext,
    candidate: &TokenSeq,
    target_repr: Option<&Tensor>,
    span_cfg: &SpanMatchConfig,
) -> Result<SimilarityScore> {
    let cand_repr = representation(model, ctx, candidate, span_cfg)?;
    match (cand_repr, target_repr) {
        (Some(c), Some(t)) => span_similarity(&c, t, span_cfg),
        _ => Ok(SimilarityScore::zero()),
    }
}

/// A frozen candidate set for rank-correlation tracking: token sequences
/// plus their similarity labels.
pub struct TauSet {
    pub example_index: usize,
    pub candidates: Vec<TokenSeq>,
    pub labels: Vec<f64>,
}

/// Decode candidate sets once (from the scoring model) and label them with
/// span similarity; later calls to [`mean_kendall_tau`] rescore the same
/// sets under other checkpoints.
pub fn build_tau_sets(
    scorer: &Model,
    examples: &[Example],
    decode_cfg: &DecodeConfig,
    span_cfg: &SpanMatchConfig,
) -> Result<Vec<TauSet>> {
    let sets: Vec<Result<TauSet>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let cfg_ex = DecodeConfig {
                seed: derive_seed(decode_cfg.seed, &[ex.id]),
                ..decode_cfg.clone()
            };
            let cands = decode(scorer, &ex.context, &cfg_ex)?;
            let ctx = infer::encode_ctx(scorer, &ex.context)?;
            let target_repr = representation(scorer, &ctx, &ex.target, span_cfg)?;
            let mut tokens = Vec::with_capacity(cands.len());
            let mut labels = Vec::with_capacity(cands.len());
            for c in &cands {
                let sim =
                    candidate_similarity(scorer, &ctx, &c.tokens, target_repr.as_ref(), span_cfg)?;
                tokens.push(c.tokens.clone());
                labels.push(sim.value);
            }
            Ok(TauSet {
                example_index: i,
                candidates: tokens,
                labels,
            })
        })
        .collect();
    sets.into_iter().collect()
}

/// Mean Kendall τ-b between candidate log-probabilities under `model` and
/// the frozen similarity labels. Degenerate sets (all tied) are skipped.
pub fn mean_kendall_tau(model: &Model, examples: &[Example], sets: &[TauSet]) -> Result<f64> {
    let taus: Vec<Result<Option<f64>>> = sets
        .par_iter()
        .map(|set| {
            if set.candidates.len() < 2 {
                return Ok(None);
            }
            let ex = &examples[set.example_index];
            let ctx = infer::encode_ctx(model, &ex.context)?;
            let mut lps = Vec::with_capacity(set.candidates.len());
            for c in &set.candidates {
                lps.push(infer::sequence_log_prob_nograd(model, &ctx, c)?);
            }
            Ok(kendall_tau_b(&lps, &set.labels))
        })
        .collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in taus {
        if let Some(v) = t? {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(sum / n as f64)
}

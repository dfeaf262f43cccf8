//! Candidate generation from a trained model.
//!
//! Three strategies: plain beam search, group-diverse beam search with a
//! Hamming penalty on tokens earlier groups already picked, and nucleus
//! (top-p) sampling. No repetition-blocking heuristics anywhere — their
//! absence is deliberate and load-bearing for the calibration analyses.
//!
//! Every emitted candidate stores its true summed log-probability under the
//! decoding model (selection penalties never leak into it), so stored scores
//! match teacher-forced recomputation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::infer::{encode_ctx, DecoderSession, EncodedContext};
use crate::model::Model;
use crate::tokens::{TokenSeq, BOS_ID, EOS_ID, PAD_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMethod {
    Beam,
    DiverseBeam,
    Nucleus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub method: DecodeMethod,
    /// Candidate count m (and the beam width for beam methods).
    pub num_candidates: usize,
    /// Length-normalization exponent α; 0 disables normalization.
    pub alpha: f64,
    /// Nucleus cumulative-probability threshold p ∈ (0, 1].
    pub nucleus_p: f64,
    /// Sampling temperature (nucleus only).
    pub temperature: f64,
    /// Diverse beam: number of groups g (must divide m).
    pub num_groups: usize,
    /// Diverse beam: Hamming diversity strength λ_div.
    pub diversity_penalty: f64,
    /// Maximum candidate length in tokens (including a trailing EOS).
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            method: DecodeMethod::Beam,
            num_candidates: 8,
            alpha: 0.0,
            nucleus_p: 0.95,
            temperature: 1.0,
            num_groups: 2,
            diversity_penalty: 1.0,
            max_len: 16,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_candidates == 0 {
            return Err(Error::InvalidConfig("num_candidates must be >= 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidConfig("max_len must be >= 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::InvalidConfig("alpha must be >= 0".into()));
        }
        match self.method {
            DecodeMethod::Nucleus => {
                if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
                    return Err(Error::InvalidConfig("nucleus_p must be in (0, 1]".into()));
                }
                if self.temperature <= 0.0 {
                    return Err(Error::InvalidConfig("temperature must be > 0".into()));
                }
            }
            DecodeMethod::DiverseBeam => {
                if self.num_groups == 0 || self.num_candidates % self.num_groups != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "num_groups {} must divide num_candidates {}",
                        self.num_groups, self.num_candidates
                    )));
                }
                if self.diversity_penalty < 0.0 {
                    return Err(Error::InvalidConfig("diversity_penalty must be >= 0".into()));
                }
            }
            DecodeMethod::Beam => {}
        }
        Ok(())
    }
}

/// One decoded candidate with its model score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub tokens: TokenSeq,
    /// Summed token log-probability under the decoding model.
    pub log_prob: f64,
    /// `log_prob / len(tokens)^alpha`.
    pub normalized_score: f64,
}

impl ScoredCandidate {
    fn new(tokens: Vec<u32>, log_prob: f64, alpha: f64) -> Self {
        let normalized_score = normalized_score(log_prob, tokens.len(), alpha);
        ScoredCandidate {
            tokens: TokenSeq::new(tokens),
            log_prob,
            normalized_score,
        }
    }
}

pub fn normalized_score(log_prob: f64, len: usize, alpha: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(alpha)
}

/// Candidate ranking order: normalized score first, then the tie rules of
/// `select_best` (shorter, then lexicographically smaller tokens).
fn candidate_order(a: &ScoredCandidate, b: &ScoredCandidate) -> std::cmp::Ordering {
    b.normalized_score
        .partial_cmp(&a.normalized_score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.ids().cmp(b.tokens.ids()))
}

/// Dispatch on the configured method.
pub fn decode(model: &Model, x: &TokenSeq, cfg: &DecodeConfig) -> Result<Vec<ScoredCandidate>> {
    match cfg.method {
        DecodeMethod::Beam => beam_search(model, x, cfg),
        DecodeMethod::DiverseBeam => diverse_beam_search(model, x, cfg),
        DecodeMethod::Nucleus => nucleus_sample(model, x, cfg),
    }
}

fn check_lengths(model: &Model, cfg: &DecodeConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.max_len > model.config.max_dec_len {
        return Err(Error::InvalidConfig(format!(
            "decode max_len {} exceeds model max_dec_len {}",
            cfg.max_len, model.config.max_dec_len
        )));
    }
    Ok(())
}

/// A live hypothesis: its tokens so far, true log-prob, the decoder state
/// having consumed BOS + tokens, and the next-token distribution.
struct Hyp<'m> {
    tokens: Vec<u32>,
    log_prob: f64,
    session: DecoderSession<'m>,
    dist: Vec<f64>,
}

struct Expansion {
    parent: usize,
    token: u32,
    log_prob: f64,
    /// Score used for selection only (diverse beam subtracts its penalty
    /// here); `log_prob` stays the true model score.
    selection_score: f64,
}

/// Order expansions: higher selection score first, ties by the would-be
/// child token sequence (lexicographic), which is a total order because
/// children are distinct.
fn rank_expansions(expansions: &mut [Expansion], live: &[Hyp<'_>]) {
    expansions.sort_by(|a, b| {
        b.selection_score
            .partial_cmp(&a.selection_score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                let ta = &live[a.parent].tokens;
                let tb = &live[b.parent].tokens;
                ta.iter()
                    .chain(std::iter::once(&a.token))
                    .cmp(tb.iter().chain(std::iter::once(&b.token)))
            })
    });
}

/// One width-`width` beam over `allowed` next tokens. The per-step
/// `penalty(step, token)` is subtracted from the selection score only;
/// `on_select` observes every selected expansion (diverse-beam bookkeeping).
fn beam_core<'m>(
    model: &'m Model,
    ctx: &'m EncodedContext,
    width: usize,
    max_len: usize,
    mut penalty: impl FnMut(usize, u32) -> f64,
    mut on_select: impl FnMut(usize, u32),
) -> Result<Vec<(Vec<u32>, f64)>> {
    let vocab = model.config.vocab_size;
    let mut root = DecoderSession::new(model, ctx);
    let dist = root.step(BOS_ID)?.log_probs;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        log_prob: 0.0,
        session: root,
        dist,
    }];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();

    for step in 0..max_len {
        if live.is_empty() {
            break;
        }
        let mut expansions = Vec::with_capacity(live.len() * vocab as usize);
        for (parent, hyp) in live.iter().enumerate() {
            for token in 0..vocab {
                if token == PAD_ID || token == BOS_ID {
                    continue;
                }
                let log_prob = hyp.log_prob + hyp.dist[token as usize];
                expansions.push(Expansion {
                    parent,
                    token,
                    log_prob,
                    selection_score: log_prob - penalty(step, token),
                });
            }
        }
        rank_expansions(&mut expansions, &live);
        expansions.truncate(width);

        let mut next_live = Vec::with_capacity(width);
        for ex in &expansions {
            on_select(step, ex.token);
            let parent = &live[ex.parent];
            let mut tokens = parent.tokens.clone();
            tokens.push(ex.token);
            if ex.token == EOS_ID || tokens.len() == max_len {
                finished.push((tokens, ex.log_prob));
            } else {
                let mut session = parent.session.clone();
                let dist = session.step(ex.token)?.log_probs;
                next_live.push(Hyp {
                    tokens,
                    log_prob: ex.log_prob,
                    session,
                    dist,
                });
            }
        }
        live = next_live;
    }
    Ok(finished)
}

fn finish_candidates(
    finished: Vec<(Vec<u32>, f64)>,
    m: usize,
    alpha: f64,
) -> Vec<ScoredCandidate> {
    let mut out: Vec<ScoredCandidate> = finished
        .into_iter()
        .map(|(tokens, lp)| ScoredCandidate::new(tokens, lp, alpha))
        .collect();
    out.sort_by(candidate_order);
    out.truncate(m);
    out
}

/// Standard best-first beam search with width m. Finished hypotheses are
/// frozen and compete with ongoing ones via the α-normalized score at the
/// end. Deterministic given (θ, x, cfg).
pub fn beam_search(model: &Model, x: &TokenSeq, cfg: &DecodeConfig) -> Result<Vec<ScoredCandidate>> {
    check_lengths(model, cfg)?;
    let ctx = encode_ctx(model, x)?;
    let finished = beam_core(
        model,
        &ctx,
        cfg.num_candidates,
        cfg.max_len,
        |_, _| 0.0,
        |_, _| {},
    )?;
    Ok(finish_candidates(finished, cfg.num_candidates, cfg.alpha))
}

/// Diverse beam search: g groups of width m/g decoded step-synchronously.
/// Group h subtracts `λ_div × (times earlier groups chose this token at
/// this step)` from the selection score (Hamming diversity). Group 0 is
/// exactly plain beam search of width m/g.
pub fn diverse_beam_search(
    model: &Model,
    x: &TokenSeq,
    cfg: &DecodeConfig,
) -> Result<Vec<ScoredCandidate>> {
    check_lengths(model, cfg)?;
    if cfg.method == DecodeMethod::DiverseBeam && cfg.num_candidates % cfg.num_groups != 0 {
        return Err(Error::InvalidConfig(
            "num_groups must divide num_candidates".into(),
        ));
    }
    let ctx = encode_ctx(model, x)?;
    let group_width = cfg.num_candidates / cfg.num_groups;
    let vocab = model.config.vocab_size as usize;

    // counts[step][token] = how many times an earlier group picked `token`
    // at `step`
    let mut counts: Vec<Vec<u32>> = vec![vec![0; vocab]; cfg.max_len];
    let mut out = Vec::with_capacity(cfg.num_candidates);
    for _group in 0..cfg.num_groups {
        let mut selected: Vec<(usize, u32)> = Vec::new();
        let finished = beam_core(
            model,
            &ctx,
            group_width,
            cfg.max_len,
            |step, token| cfg.diversity_penalty * counts[step][token as usize] as f64,
            |step, token| selected.push((step, token)),
        )?;
        for (step, token) in selected {
            counts[step][token as usize] += 1;
        }
        out.extend(finish_candidates(finished, group_width, cfg.alpha));
    }
    out.sort_by(candidate_order);
    Ok(out)
}

/// Nucleus (top-p) sampling: at each step keep the smallest set of
/// highest-probability tokens with cumulative mass ≥ p, renormalize, and
/// sample. m sequences are drawn sequentially from one seeded stream and
/// deduplicated, so fewer than m may return. Stored log-probs come from the
/// unmodified model distribution.
pub fn nucleus_sample(model: &Model, x: &TokenSeq, cfg: &DecodeConfig) -> Result<Vec<ScoredCandidate>> {
    check_lengths(model, cfg)?;
    let ctx = encode_ctx(model, x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = model.config.vocab_size as usize;

    let mut out: Vec<ScoredCandidate> = Vec::new();
    for _ in 0..cfg.num_candidates {
        let mut session = DecoderSession::new(model, &ctx);
        let mut dist = session.step(BOS_ID)?.log_probs;
        let mut tokens: Vec<u32> = Vec::new();
        let mut log_prob = 0.0;
        loop {
            // sampling distribution: temperature-scaled, PAD/BOS excluded
            let mut probs: Vec<(u32, f64)> = (0..vocab as u32)
                .filter(|&t| t != PAD_ID && t != BOS_ID)
                .map(|t| (t, dist[t as usize] / cfg.temperature))
                .collect();
            let max = probs.iter().map(|&(_, lp)| lp).fold(f64::NEG_INFINITY, f64::max);
            let mut mass = 0.0;
            for (_, lp) in probs.iter_mut() {
                *lp = (*lp - max).exp();
                mass += *lp;
            }
            for (_, p) in probs.iter_mut() {
                *p /= mass;
            }
            // highest probability first; ties by token id for determinism
            probs.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            let mut kept = 0;
            let mut cum = 0.0;
            for &(_, p) in probs.iter() {
                kept += 1;
                cum += p;
                if cum >= cfg.nucleus_p {
                    break;
                }
            }
            probs.truncate(kept);
            let norm: f64 = probs.iter().map(|&(_, p)| p).sum();
            let u: f64 = rng.random::<f64>() * norm;
            let mut acc = 0.0;
            let mut chosen = probs[probs.len() - 1].0;
            for &(t, p) in &probs {
                acc += p;
                if u < acc {
                    chosen = t;
                    break;
                }
            }
            log_prob += dist[chosen as usize];
            tokens.push(chosen);
            if chosen == EOS_ID || tokens.len() == cfg.max_len {
                break;
            }
            dist = session.step(chosen)?.log_probs;
        }
        let cand = ScoredCandidate::new(tokens, log_prob, cfg.alpha);
        if !out.iter().any(|c| c.tokens == cand.tokens) {
            out.push(cand);
        }
    }
    out.sort_by(candidate_order);
    Ok(out)
}

/// The candidate evaluation selects: highest normalized score, ties broken
/// by shorter length, then lexicographic token order.
pub fn select_best(candidates: &[ScoredCandidate]) -> Result<&ScoredCandidate> {
    candidates
        .iter()
        .min_by(|a, b| candidate_order(a, b))
        .ok_or(Error::EmptyInput("select_best candidates"))
}

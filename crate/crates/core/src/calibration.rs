//! Sequence likelihood calibration: aligning a model's candidate
//! log-probabilities with the candidates' similarity to the target.
//!
//! Candidates are decoded once from the frozen starting model; their
//! similarity labels are computed at that time and never change. Each
//! calibration step recomputes candidate log-probabilities under the
//! current parameters, applies one of four ranking losses, adds an optional
//! regularizer toward the frozen model, and takes an Adam step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::metrics::MetricTriple;
use crate::model::forward::{self, BoundParams};
use crate::model::{infer, Adam, Model};
use crate::seeding::derive_seed;
use crate::similarity::SimilarityScore;
use crate::tokens::TokenSeq;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossType {
    Rank,
    Margin,
    ListRank,
    ExpectedReward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegType {
    None,
    CrossEntropy,
    KlDivergence,
}

/// Which frozen label orders candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySource {
    /// Latent span F-measure (`similarity.value`).
    SpanF,
    /// Mean of the stored ROUGE-1/2/L, rescaled to [0, 1].
    Rouge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub loss_type: LossType,
    /// Ranking constant β of the hinge losses.
    pub beta: f64,
    pub reg_type: RegType,
    /// Regularizer weight λ.
    pub lambda: f64,
    pub learning_rate: f64,
    /// Pairs sampled per example for the pairwise losses.
    pub pairs_per_example: usize,
    pub similarity_source: SimilaritySource,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        // the recommended recipe: rank loss, KL regularization; β = 10 and
        // λ tied to the learning rate by lr·λ = 1e-5
        let learning_rate = 1e-4;
        CalibrationConfig {
            loss_type: LossType::Rank,
            beta: 10.0,
            reg_type: RegType::KlDivergence,
            lambda: 1e-5 / learning_rate,
            learning_rate,
            pairs_per_example: 4,
            similarity_source: SimilaritySource::SpanF,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.lambda < 0.0 {
            return Err(Error::InvalidConfig("beta and lambda must be >= 0".into()));
        }
        if self.learning_rate <= 0.0 && self.learning_rate != 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if matches!(self.loss_type, LossType::Rank | LossType::Margin)
            && self.pairs_per_example == 0
        {
            return Err(Error::InvalidConfig(
                "pairs_per_example must be >= 1 for pairwise losses".into(),
            ));
        }
        Ok(())
    }
}

/// One decoded candidate with its frozen labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub tokens: TokenSeq,
    /// log P under the frozen starting model, captured at decode time.
    pub ft_log_prob: f64,
    pub similarity: SimilarityScore,
    pub aux_rouge: Option<MetricTriple>,
}

/// A context, its reference target, and the candidate set decoded for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationExample {
    pub context: TokenSeq,
    pub target: TokenSeq,
    pub candidates: Vec<CandidateRecord>,
}

impl CalibrationExample {
    /// The frozen similarity label a config orders candidates by.
    pub fn label(&self, record: &CandidateRecord, source: SimilaritySource) -> Result<f64> {
        match source {
            SimilaritySource::SpanF => Ok(record.similarity.value),
            SimilaritySource::Rouge => {
                let r = record.aux_rouge.ok_or_else(|| {
                    Error::InvalidConfig(
                        "similarity_source = rouge requires cached rouge scores".into(),
                    )
                })?;
                Ok((r.rouge1 + r.rouge2 + r.rouge_l) / 300.0)
            }
        }
    }

    /// Candidate indices in canonical order: similarity descending, ties by
    /// higher ft_log_prob, then lexicographic tokens. Every loss reads
    /// candidates through this order, which is what makes the losses
    /// invariant to the stored candidate order.
    pub fn canonical_order(&self, source: SimilaritySource) -> Result<Vec<usize>> {
        let labels: Vec<f64> = self
            .candidates
            .iter()
            .map(|c| self.label(c, source))
            .collect::<Result<_>>()?;
        let mut idx: Vec<usize> = (0..self.candidates.len()).collect();
        idx.sort_by(|&a, &b| {
            labels[b]
                .partial_cmp(&labels[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(
                    self.candidates[b]
                        .ft_log_prob
                        .partial_cmp(&self.candidates[a].ft_log_prob)
                        .unwrap_or(std::cmp::Ordering::Equal),
                )
                .then_with(|| self.candidates[a].tokens.ids().cmp(self.candidates[b].tokens.ids()))
        });
        Ok(idx)
    }
}

/// Uniformly sample up to `k` (positive, negative) candidate index pairs
/// without replacement from the pairs with strictly different similarity,
/// oriented so the first index has the higher similarity. Returns all
/// untied pairs when fewer than `k` exist; an empty vector signals the
/// example carries no ranking signal and is skipped by pairwise losses.
pub fn sample_pairs(
    example: &CalibrationExample,
    source: SimilaritySource,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    let order = example.canonical_order(source)?;
    let mut untied: Vec<(usize, usize)> = Vec::new();
    for a in 0..order.len() {
        for b in a + 1..order.len() {
            let (ia, ib) = (order[a], order[b]);
            let la = example.label(&example.candidates[ia], source)?;
            let lb = example.label(&example.candidates[ib], source)?;
            if la != lb {
                untied.push((ia, ib));
            }
        }
    }
    if untied.len() <= k {
        return Ok(untied);
    }
    // partial Fisher-Yates: the first k slots are a uniform sample
    for i in 0..k {
        let j = i + rng.random_range(0..untied.len() - i);
        untied.swap(i, j);
    }
    untied.truncate(k);
    Ok(untied)
}

// ── loss builders (graph nodes) ──────────────────────────────────────

/// Rank loss: max(0, β − logP₊ + logP₋).
pub fn loss_rank(g: &mut Graph, lp_pos: NodeId, lp_neg: NodeId, beta: f64) -> Result<NodeId> {
    let diff = g.sub(lp_neg, lp_pos)?;
    let shifted = g.add_scalar(diff, beta);
    Ok(g.relu(shifted))
}

/// Margin loss: max(0, β(s₊ − s₋) − logP₊ + logP₋).
pub fn loss_margin(
    g: &mut Graph,
    lp_pos: NodeId,
    lp_neg: NodeId,
    s_pos: f64,
    s_neg: f64,
    beta: f64,
) -> Result<NodeId> {
    let diff = g.sub(lp_neg, lp_pos)?;
    let shifted = g.add_scalar(diff, beta * (s_pos - s_neg));
    Ok(g.relu(shifted))
}

/// List-wise rank loss over log-probs already sorted by similarity
/// descending: Σ_{i<j} max(0, β|i−j| − logP_i + logP_j).
pub fn loss_list_rank(g: &mut Graph, log_probs: &[NodeId], beta: f64) -> Result<NodeId> {
    if log_probs.len() < 2 {
        return Err(Error::InvalidConfig("list rank loss needs >= 2 candidates".into()));
    }
    let mut terms = Vec::new();
    for i in 0..log_probs.len() {
        for j in i + 1..log_probs.len() {
            let diff = g.sub(log_probs[j], log_probs[i])?;
            let shifted = g.add_scalar(diff, beta * (j - i) as f64);
            terms.push(g.relu(shifted));
        }
    }
    let stacked = g.stack_scalars(&terms)?;
    Ok(g.sum(stacked))
}

/// Expected-reward loss: −Σ_i s_i · softmax(logP)_i, the probability
/// weights computed by a max-subtracted normalized exponential.
pub fn loss_expected_reward(
    g: &mut Graph,
    log_probs: &[NodeId],
    similarities: &[f64],
) -> Result<NodeId> {
    if log_probs.is_empty() {
        return Err(Error::EmptyInput("expected reward candidates"));
    }
    assert_eq!(log_probs.len(), similarities.len());
    let stacked = g.stack_scalars(log_probs)?;
    let weights = g.softmax(stacked)?;
    let sims = g.constant(&[similarities.len()], similarities);
    let weighted = g.mul(weights, sims)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0))
}

// ── regularizer builders ─────────────────────────────────────────────

/// Cross-entropy regularizer: summed token NLL of the observed target,
/// scored exactly as given.
fn reg_cross_entropy_graph(
    g: &mut Graph,
    model: &Model,
    bp: &BoundParams,
    memory: NodeId,
    target: &TokenSeq,
) -> Result<NodeId> {
    let lp = forward::sequence_log_prob_graph(g, &model.config, bp, memory, target.ids())?;
    Ok(g.scale(lp, -1.0))
}

/// Token-level KL regularizer: Σ_t KL(P_θ(·|prefix) ‖ P_θft(·|prefix)) over
/// the full vocabulary at each target position. The frozen rows enter as
/// constants, so θ_ft receives no gradient.
fn reg_kl_graph(
    g: &mut Graph,
    model: &Model,
    bp: &BoundParams,
    memory: NodeId,
    ft: &Model,
    x: &TokenSeq,
    target: &TokenSeq,
) -> Result<NodeId> {
    if model.config != ft.config {
        return Err(Error::CacheMismatch {
            expected: "matching model configs for KL regularization".into(),
            found: "architecture mismatch between θ and θ_ft".into(),
        });
    }
    let out = forward::decode_graph(g, &model.config, bp, memory, target.ids())?;
    let ft_rows = infer::teacher_forced_nograd(ft, x, target)?;
    let vocab = model.config.vocab_size as usize;
    let mut q = Vec::with_capacity(target.len() * vocab);
    for row in &ft_rows.log_prob_rows {
        q.extend_from_slice(row);
    }
    let q_const = g.constant(&[target.len(), vocab], &q);
    let p_log = out.log_probs;
    let p = g.exp(p_log);
    let diff = g.sub(p_log, q_const)?;
    let terms = g.mul(p, diff)?;
    Ok(g.sum(terms))
}

/// Value form of the cross-entropy regularizer.
pub fn reg_cross_entropy(model: &Model, x: &TokenSeq, target: &TokenSeq) -> Result<f64> {
    let mut g = Graph::new();
    let bp = forward::bind_params(&mut g, &model.params, false);
    let mem = forward::encode_graph(&mut g, &model.config, &bp, x.ids())?;
    let node = reg_cross_entropy_graph(&mut g, model, &bp, mem, target)?;
    Ok(g.scalar_value(node))
}

/// Value form of the KL regularizer.
pub fn reg_kl(model: &Model, ft: &Model, x: &TokenSeq, target: &TokenSeq) -> Result<f64> {
    let mut g = Graph::new();
    let bp = forward::bind_params(&mut g, &model.params, false);
    let mem = forward::encode_graph(&mut g, &model.config, &bp, x.ids())?;
    let node = reg_kl_graph(&mut g, model, &bp, mem, ft, x, target)?;
    Ok(g.scalar_value(node))
}

// ── the calibration step ─────────────────────────────────────────────

/// Per-step loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrateStats {
    /// Mean calibration loss over the batch.
    pub cal_loss: f64,
    /// Mean regularizer value over the batch (unweighted by λ).
    pub reg_loss: f64,
    /// Mean total objective (cal + λ·reg).
    pub total_loss: f64,
    /// Examples skipped by pairwise/list losses for lack of ranking signal.
    pub skipped_examples: usize,
}

struct ExampleOutcome {
    cal: f64,
    reg: f64,
    grads: Vec<f64>,
    skipped: bool,
}

fn example_losses(
    model: &Model,
    ft: &Model,
    example: &CalibrationExample,
    cfg: &CalibrationConfig,
    pair_seed: u64,
) -> Result<ExampleOutcome> {
    let mut g = Graph::new();
    let bp = forward::bind_params(&mut g, &model.params, true);
    let mem = forward::encode_graph(&mut g, &model.config, &bp, example.context.ids())?;

    // candidate log-probs under the current θ (recomputed every step);
    // computed lazily so pairwise losses only pay for sampled candidates
    let mut lp_nodes: Vec<Option<NodeId>> = vec![None; example.candidates.len()];
    macro_rules! lp {
        ($g:expr, $idx:expr) => {{
            if lp_nodes[$idx].is_none() {
                lp_nodes[$idx] = Some(forward::sequence_log_prob_graph(
                    $g,
                    &model.config,
                    &bp,
                    mem,
                    example.candidates[$idx].tokens.ids(),
                )?);
            }
            lp_nodes[$idx].unwrap()
        }};
    }

    let mut skipped = false;
    let cal_node: Option<NodeId> = match cfg.loss_type {
        LossType::Rank | LossType::Margin => {
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
            let pairs = sample_pairs(example, cfg.similarity_source, cfg.pairs_per_example, &mut rng)?;
            if pairs.is_empty() {
                skipped = true;
                None
            } else {
                let mut terms = Vec::with_capacity(pairs.len());
                for &(pos, neg) in &pairs {
                    let lp_pos = lp!(&mut g, pos);
                    let lp_neg = lp!(&mut g, neg);
                    let term = match cfg.loss_type {
                        LossType::Rank => loss_rank(&mut g, lp_pos, lp_neg, cfg.beta)?,
                        LossType::Margin => {
                            let s_pos = example.label(&example.candidates[pos], cfg.similarity_source)?;
                            let s_neg = example.label(&example.candidates[neg], cfg.similarity_source)?;
                            loss_margin(&mut g, lp_pos, lp_neg, s_pos, s_neg, cfg.beta)?
                        }
                        _ => unreachable!(),
                    };
                    terms.push(term);
                }
                let stacked = g.stack_scalars(&terms)?;
                Some(g.mean(stacked))
            }
        }
        LossType::ListRank => {
            let order = example.canonical_order(cfg.similarity_source)?;
            let all_tied = {
                let labels: Vec<f64> = example
                    .candidates
                    .iter()
                    .map(|c| example.label(c, cfg.similarity_source))
                    .collect::<Result<_>>()?;
                labels.windows(2).all(|w| w[0] == w[1])
            };
            if order.len() < 2 || all_tied {
                skipped = true;
                None
            } else {
                let mut lps = Vec::with_capacity(order.len());
                for &idx in &order {
                    lps.push(lp!(&mut g, idx));
                }
                Some(loss_list_rank(&mut g, &lps, cfg.beta)?)
            }
        }
        LossType::ExpectedReward => {
            let order = example.canonical_order(cfg.similarity_source)?;
            let mut lps = Vec::with_capacity(order.len());
            let mut sims = Vec::with_capacity(order.len());
            for &idx in &order {
                lps.push(lp!(&mut g, idx));
                sims.push(example.label(&example.candidates[idx], cfg.similarity_source)?);
            }
            Some(loss_expected_reward(&mut g, &lps, &sims)?)
        }
    };

    // regularizers see the EOS-terminated target: calibration must not
    // drift the stopping distribution either
    let target = example.target.with_eos();
    let reg_node: Option<NodeId> = match cfg.reg_type {
        RegType::None => None,
        RegType::CrossEntropy => Some(reg_cross_entropy_graph(&mut g, model, &bp, mem, &target)?),
        RegType::KlDivergence => Some(reg_kl_graph(
            &mut g,
            model,
            &bp,
            mem,
            ft,
            &example.context,
            &target,
        )?),
    };

    let total = match (cal_node, reg_node) {
        (Some(c), Some(r)) => {
            let weighted = g.scale(r, cfg.lambda);
            Some(g.add(c, weighted)?)
        }
        (Some(c), None) => Some(c),
        (None, Some(r)) => Some(g.scale(r, cfg.lambda)),
        (None, None) => None,
    };

    let (cal, reg) = (
        cal_node.map_or(0.0, |n| g.scalar_value(n)),
        reg_node.map_or(0.0, |n| g.scalar_value(n)),
    );
    let grads = match total {
        Some(t) => {
            g.backward(t)?;
            forward::collect_grads(&g, &model.params, &bp)
        }
        None => vec![0.0; model.params.layout().total_len()],
    };
    Ok(ExampleOutcome {
        cal,
        reg,
        grads,
        skipped,
    })
}

/// Batch calibration objective and its gradient (mean over examples of
/// `L_cal + λ·L_reg`). Candidate log-probs are recomputed under the current
/// θ; similarity labels are read from the records. Examples run in
/// parallel; gradients reduce in batch order.
pub fn calibrate_objective(
    model: &Model,
    ft: &Model,
    batch: &[CalibrationExample],
    cfg: &CalibrationConfig,
    step: u64,
    seed: u64,
) -> Result<(CalibrateStats, Vec<f64>)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("calibration batch"));
    }
    let outcomes: Vec<Result<ExampleOutcome>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let pair_seed = derive_seed(seed, &[step, i as u64]);
            example_losses(model, ft, ex, cfg, pair_seed)
        })
        .collect();

    let mut grads = vec![0.0; model.params.layout().total_len()];
    let mut cal_sum = 0.0;
    let mut reg_sum = 0.0;
    let mut skipped = 0usize;
    for outcome in outcomes {
        let o = outcome?;
        cal_sum += o.cal;
        reg_sum += o.reg;
        skipped += o.skipped as usize;
        for (acc, v) in grads.iter_mut().zip(&o.grads) {
            *acc += v;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let stats = CalibrateStats {
        cal_loss: cal_sum * scale,
        reg_loss: reg_sum * scale,
        total_loss: (cal_sum + cfg.lambda * reg_sum) * scale,
        skipped_examples: skipped,
    };
    for v in grads.iter_mut() {
        *v *= scale;
    }
    Ok((stats, grads))
}

/// One calibration update on a batch: the objective above plus an Adam
/// step. Halts with a diagnostic on a non-finite loss.
pub fn calibrate_step(
    model: &mut Model,
    opt: &mut Adam,
    ft: &Model,
    batch: &[CalibrationExample],
    cfg: &CalibrationConfig,
    step: u64,
    seed: u64,
) -> Result<CalibrateStats> {
    let (stats, grads) = calibrate_objective(model, ft, batch, cfg, step, seed)?;
    if !stats.total_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            value: stats.total_loss,
        });
    }
    opt.step(&mut model.params.values, &grads, cfg.learning_rate);
    Ok(stats)
}

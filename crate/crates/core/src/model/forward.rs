//! Graph-recorded forward passes (the differentiable path).
//!
//! Pre-norm blocks throughout: `x + attn(ln(x))`, `x + ffn(ln(x))`, with a
//! final layer norm on both stacks. Decoder input is the BOS-shifted target,
//! so position t conditions on y[0..t-1] and the context only.

use std::collections::HashMap;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tokens::BOS_ID;

use super::{ModelConfig, Parameters};

/// Parameter leaves bound into one graph.
pub struct BoundParams {
    ids: HashMap<String, NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }
}

/// Insert every parameter as a leaf of `g`.
pub fn bind_params(g: &mut Graph, params: &Parameters, requires_grad: bool) -> BoundParams {
    let mut ids = HashMap::new();
    for entry in params.layout().entries() {
        let (shape, data) = params.get(&entry.name);
        ids.insert(entry.name.clone(), g.leaf_slice(shape, data, requires_grad));
    }
    BoundParams { ids }
}

/// Collect leaf gradients back into a flat vector in layout order.
/// Parameters the loss never touched contribute zeros.
pub fn collect_grads(g: &Graph, params: &Parameters, bound: &BoundParams) -> Vec<f64> {
    let mut flat = vec![0.0; params.layout().total_len()];
    for entry in params.layout().entries() {
        if let Some(grad) = g.grad(bound.id(&entry.name)) {
            let len: usize = entry.shape.iter().product();
            flat[entry.offset..entry.offset + len].copy_from_slice(grad);
        }
    }
    flat
}

const MASK_FILL: f64 = -1e30;

fn multi_head_attention(
    g: &mut Graph,
    cfg: &ModelConfig,
    bp: &BoundParams,
    prefix: &str,
    queries: NodeId,
    keys_values: NodeId,
    causal_mask: Option<&[bool]>,
) -> Result<NodeId> {
    let q = g.matmul(queries, bp.id(&format!("{prefix}.wq")))?;
    let q = g.add_row(q, bp.id(&format!("{prefix}.bq")))?;
    let k = g.matmul(keys_values, bp.id(&format!("{prefix}.wk")))?;
    let k = g.add_row(k, bp.id(&format!("{prefix}.bk")))?;
    let v = g.matmul(keys_values, bp.id(&format!("{prefix}.wv")))?;
    let v = g.add_row(v, bp.id(&format!("{prefix}.bv")))?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let scores = match causal_mask {
            Some(mask) => g.masked_fill(scores, mask, MASK_FILL)?,
            None => scores,
        };
        let attn = g.softmax(scores)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let ctx = g.concat_cols(&heads)?;
    let out = g.matmul(ctx, bp.id(&format!("{prefix}.wo")))?;
    g.add_row(out, bp.id(&format!("{prefix}.bo")))
}

fn layer_norm(g: &mut Graph, bp: &BoundParams, prefix: &str, x: NodeId) -> Result<NodeId> {
    g.layer_norm(x, bp.id(&format!("{prefix}.g")), bp.id(&format!("{prefix}.b")))
}

fn ffn(g: &mut Graph, bp: &BoundParams, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = g.matmul(x, bp.id(&format!("{prefix}.w1")))?;
    let h = g.add_row(h, bp.id(&format!("{prefix}.b1")))?;
    let h = g.gelu(h);
    let h = g.matmul(h, bp.id(&format!("{prefix}.w2")))?;
    g.add_row(h, bp.id(&format!("{prefix}.b2")))
}

fn embed_tokens(
    g: &mut Graph,
    bp: &BoundParams,
    ids: &[u32],
    pos_table: &str,
) -> Result<NodeId> {
    let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let tok = g.embed_lookup(bp.id("embed.tok"), &idx)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = g.embed_lookup(bp.id(pos_table), &positions)?;
    g.add(tok, pos)
}

/// Encoder stack: token + position embeddings through the self-attention
/// layers; returns memory of shape `len(x) × d_model`.
pub fn encode_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    bp: &BoundParams,
    x: &[u32],
) -> Result<NodeId> {
    if x.is_empty() {
        return Err(Error::EmptyInput("context"));
    }
    if x.len() > cfg.max_enc_len {
        return Err(Error::SequenceTooLong {
            len: x.len(),
            max: cfg.max_enc_len,
        });
    }
    let mut h = embed_tokens(g, bp, x, "embed.pos_enc")?;
    for i in 0..cfg.num_enc_layers {
        let normed = layer_norm(g, bp, &format!("enc.{i}.ln1"), h)?;
        let attn = multi_head_attention(g, cfg, bp, &format!("enc.{i}.attn"), normed, normed, None)?;
        h = g.add(h, attn)?;
        let normed = layer_norm(g, bp, &format!("enc.{i}.ln2"), h)?;
        let ff = ffn(g, bp, &format!("enc.{i}.ffn"), normed)?;
        h = g.add(h, ff)?;
    }
    layer_norm(g, bp, "enc.final_ln", h)
}

pub struct DecodeOut {
    /// Log-probability rows, shape `len(y) × vocab`.
    pub log_probs: NodeId,
    /// Decoder hidden states after the final layer norm, `len(y) × d_model`.
    pub states: NodeId,
}

/// Teacher-forced decoder pass over BOS-shifted `y` against encoder memory.
pub fn decode_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    bp: &BoundParams,
    memory: NodeId,
    y: &[u32],
) -> Result<DecodeOut> {
    if y.is_empty() {
        return Err(Error::EmptyInput("target"));
    }
    if y.len() > cfg.max_dec_len {
        return Err(Error::SequenceTooLong {
            len: y.len(),
            max: cfg.max_dec_len,
        });
    }
    let len = y.len();
    // BOS-shifted decoder input: BOS, y[0], ..., y[len-2]
    let mut input = Vec::with_capacity(len);
    input.push(BOS_ID);
    input.extend_from_slice(&y[..len - 1]);

    // strict upper triangle masked: position t sees positions <= t
    let mut mask = vec![false; len * len];
    for i in 0..len {
        for j in i + 1..len {
            mask[i * len + j] = true;
        }
    }

    let mut h = embed_tokens(g, bp, &input, "embed.pos_dec")?;
    for i in 0..cfg.num_dec_layers {
        let normed = layer_norm(g, bp, &format!("dec.{i}.ln1"), h)?;
        let attn = multi_head_attention(
            g,
            cfg,
            bp,
            &format!("dec.{i}.self_attn"),
            normed,
            normed,
            Some(&mask),
        )?;
        h = g.add(h, attn)?;
        let normed = layer_norm(g, bp, &format!("dec.{i}.ln2"), h)?;
        let cross = multi_head_attention(
            g,
            cfg,
            bp,
            &format!("dec.{i}.cross_attn"),
            normed,
            memory,
            None,
        )?;
        h = g.add(h, cross)?;
        let normed = layer_norm(g, bp, &format!("dec.{i}.ln3"), h)?;
        let ff = ffn(g, bp, &format!("dec.{i}.ffn"), normed)?;
        h = g.add(h, ff)?;
    }
    let states = layer_norm(g, bp, "dec.final_ln", h)?;

    let logits = if cfg.tie_output_embedding {
        // scaled tied projection keeps initial logits O(1)
        let scaled = g.scale(states, 1.0 / (cfg.d_model as f64).sqrt());
        let et = g.transpose(bp.id("embed.tok"))?;
        g.matmul(scaled, et)?
    } else {
        let z = g.matmul(states, bp.id("out.w"))?;
        g.add_row(z, bp.id("out.b"))?
    };
    let log_probs = g.log_softmax(logits)?;
    Ok(DecodeOut { log_probs, states })
}

/// Scalar log P(y | x): the gathered per-position log-probs of the realized
/// tokens, summed.
pub fn sequence_log_prob_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    bp: &BoundParams,
    memory: NodeId,
    y: &[u32],
) -> Result<NodeId> {
    let out = decode_graph(g, cfg, bp, memory, y)?;
    let idx: Vec<usize> = y.iter().map(|&t| t as usize).collect();
    let gathered = g.gather_per_row(out.log_probs, &idx)?;
    Ok(g.sum(gathered))
}

/// Summed token NLL of `y` (with label smoothing when configured).
/// This is the per-example building block of the MLE objective.
pub fn nll_sum_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    bp: &BoundParams,
    memory: NodeId,
    y: &[u32],
) -> Result<NodeId> {
    let out = decode_graph(g, cfg, bp, memory, y)?;
    let idx: Vec<usize> = y.iter().map(|&t| t as usize).collect();
    let gathered = g.gather_per_row(out.log_probs, &idx)?;
    let sum_lp = g.sum(gathered);
    let nll = g.scale(sum_lp, -1.0);
    let eps = cfg.label_smoothing;
    if eps == 0.0 {
        return Ok(nll);
    }
    // smoothed: (1-eps) * nll_target + eps * mean-over-vocab nll per position
    let all = g.sum(out.log_probs);
    let uniform_nll = g.scale(all, -1.0 / cfg.vocab_size as f64);
    let a = g.scale(nll, 1.0 - eps);
    let b = g.scale(uniform_nll, eps);
    g.add(a, b)
}

//! Incremental decoder inference with per-layer KV caches.
//!
//! This is the fast, gradient-free twin of [`super::forward`]: the same
//! kernels and the same arithmetic order per token, but it advances one
//! position at a time so beam search costs O(len) forwards instead of
//! O(len^2). Agreement with the graph path is pinned by tests.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;
use crate::tokens::{TokenSeq, BOS_ID};

use super::{Model, ModelConfig};

/// Encoder output plus the per-layer cross-attention keys/values derived
/// from it. Immutable; shared by every decoding session for one context.
pub struct EncodedContext {
    pub memory: Tensor,
    cross_k: Vec<Vec<f64>>,
    cross_v: Vec<Vec<f64>>,
}

fn linear(x: &[f64], rows: usize, w: &[f64], b: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d_out];
    kernels::matmul_nn_acc(x, w, &mut out, rows, d_in, d_out);
    for r in 0..rows {
        for j in 0..d_out {
            out[r * d_out + j] += b[j];
        }
    }
    out
}

fn layer_norm_rows(x: &[f64], rows: usize, d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        kernels::layer_norm_row(&x[r * d..(r + 1) * d], g, b, 1e-5, &mut out[r * d..(r + 1) * d]);
    }
    out
}

struct AttnWeights<'a> {
    wq: &'a [f64],
    bq: &'a [f64],
    wk: &'a [f64],
    bk: &'a [f64],
    wv: &'a [f64],
    bv: &'a [f64],
    wo: &'a [f64],
    bo: &'a [f64],
}

fn attn_weights<'a>(model: &'a Model, prefix: &str) -> AttnWeights<'a> {
    AttnWeights {
        wq: model.params.get(&format!("{prefix}.wq")).1,
        bq: model.params.get(&format!("{prefix}.bq")).1,
        wk: model.params.get(&format!("{prefix}.wk")).1,
        bk: model.params.get(&format!("{prefix}.bk")).1,
        wv: model.params.get(&format!("{prefix}.wv")).1,
        bv: model.params.get(&format!("{prefix}.bv")).1,
        wo: model.params.get(&format!("{prefix}.wo")).1,
        bo: model.params.get(&format!("{prefix}.bo")).1,
    }
}

/// Attend a single query row against cached keys/values, head by head.
fn attend_row(query: &[f64], keys: &[f64], values: &[f64], cfg: &ModelConfig) -> Vec<f64> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let t = keys.len() / d;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0.0; d];
    let mut scores = vec![0.0; t];
    for h in 0..cfg.num_heads {
        let qh = &query[h * dh..(h + 1) * dh];
        for (i, s) in scores.iter_mut().enumerate() {
            let kh = &keys[i * d + h * dh..i * d + (h + 1) * dh];
            *s = kernels::dot(qh, kh) * scale;
        }
        kernels::softmax_row(&mut scores);
        let out = &mut ctx[h * dh..(h + 1) * dh];
        for (i, &w) in scores.iter().enumerate() {
            let vh = &values[i * d + h * dh..i * d + (h + 1) * dh];
            for (o, &v) in out.iter_mut().zip(vh) {
                *o += w * v;
            }
        }
    }
    ctx
}

/// Full (non-incremental) multi-head attention for the encoder.
fn attend_full(
    queries: &[f64],
    keys: &[f64],
    values: &[f64],
    rows: usize,
    cfg: &ModelConfig,
) -> Vec<f64> {
    let d = cfg.d_model;
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let ctx = attend_row(&queries[r * d..(r + 1) * d], keys, values, cfg);
        out[r * d..(r + 1) * d].copy_from_slice(&ctx);
    }
    out
}

fn gelu_all(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = kernels::gelu(*v);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Run the encoder and precompute cross-attention KV per decoder layer.
pub fn encode_ctx(model: &Model, x: &TokenSeq) -> Result<EncodedContext> {
    let cfg = &model.config;
    if x.is_empty() {
        return Err(Error::EmptyInput("context"));
    }
    if x.len() > cfg.max_enc_len {
        return Err(Error::SequenceTooLong {
            len: x.len(),
            max: cfg.max_enc_len,
        });
    }
    let d = cfg.d_model;
    let len = x.len();
    let tok = model.params.get("embed.tok").1;
    let pos = model.params.get("embed.pos_enc").1;
    let mut h = vec![0.0; len * d];
    for (r, &id) in x.ids().iter().enumerate() {
        if id >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        let row = &mut h[r * d..(r + 1) * d];
        let id = id as usize;
        for j in 0..d {
            row[j] = tok[id * d + j] + pos[r * d + j];
        }
    }

    for i in 0..cfg.num_enc_layers {
        let ln1 = (
            model.params.get(&format!("enc.{i}.ln1.g")).1,
            model.params.get(&format!("enc.{i}.ln1.b")).1,
        );
        let normed = layer_norm_rows(&h, len, d, ln1.0, ln1.1);
        let aw = attn_weights(model, &format!("enc.{i}.attn"));
        let q = linear(&normed, len, aw.wq, aw.bq, d, d);
        let k = linear(&normed, len, aw.wk, aw.bk, d, d);
        let v = linear(&normed, len, aw.wv, aw.bv, d, d);
        let ctx = attend_full(&q, &k, &v, len, cfg);
        let attn_out = linear(&ctx, len, aw.wo, aw.bo, d, d);
        add_into(&mut h, &attn_out);

        let ln2 = (
            model.params.get(&format!("enc.{i}.ln2.g")).1,
            model.params.get(&format!("enc.{i}.ln2.b")).1,
        );
        let normed = layer_norm_rows(&h, len, d, ln2.0, ln2.1);
        let w1 = model.params.get(&format!("enc.{i}.ffn.w1")).1;
        let b1 = model.params.get(&format!("enc.{i}.ffn.b1")).1;
        let w2 = model.params.get(&format!("enc.{i}.ffn.w2")).1;
        let b2 = model.params.get(&format!("enc.{i}.ffn.b2")).1;
        let mut ff = linear(&normed, len, w1, b1, d, cfg.d_ff);
        gelu_all(&mut ff);
        let ff = linear(&ff, len, w2, b2, cfg.d_ff, d);
        add_into(&mut h, &ff);
    }
    let g = model.params.get("enc.final_ln.g").1;
    let b = model.params.get("enc.final_ln.b").1;
    let memory = layer_norm_rows(&h, len, d, g, b);

    let mut cross_k = Vec::with_capacity(cfg.num_dec_layers);
    let mut cross_v = Vec::with_capacity(cfg.num_dec_layers);
    for i in 0..cfg.num_dec_layers {
        let aw = attn_weights(model, &format!("dec.{i}.cross_attn"));
        cross_k.push(linear(&memory, len, aw.wk, aw.bk, d, d));
        cross_v.push(linear(&memory, len, aw.wv, aw.bv, d, d));
    }
    Ok(EncodedContext {
        memory: Tensor::new(vec![len, d], memory)?,
        cross_k,
        cross_v,
    })
}

/// One decoder step's outputs.
pub struct StepOut {
    /// Log-probabilities over the vocabulary for the next token.
    pub log_probs: Vec<f64>,
    /// Final-layer-norm hidden state of this position.
    pub hidden: Vec<f64>,
}

/// Incremental decoder state. Feed the BOS-shifted input one token at a
/// time; each step yields the next-token distribution.
#[derive(Clone)]
pub struct DecoderSession<'m> {
    model: &'m Model,
    ctx: &'m EncodedContext,
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
    pos: usize,
}

impl<'m> DecoderSession<'m> {
    pub fn new(model: &'m Model, ctx: &'m EncodedContext) -> Self {
        let layers = model.config.num_dec_layers;
        DecoderSession {
            model,
            ctx,
            self_k: vec![Vec::new(); layers],
            self_v: vec![Vec::new(); layers],
            pos: 0,
        }
    }

    /// Number of decoder input tokens consumed so far.
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }

    /// Consume one decoder-input token (BOS first) and return the
    /// distribution over the following token.
    pub fn step(&mut self, token: u32) -> Result<StepOut> {
        let cfg = &self.model.config;
        let d = cfg.d_model;
        if token >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab: cfg.vocab_size,
            });
        }
        if self.pos >= cfg.max_dec_len {
            return Err(Error::SequenceTooLong {
                len: self.pos + 1,
                max: cfg.max_dec_len,
            });
        }
        let tok = self.model.params.get("embed.tok").1;
        let pos_table = self.model.params.get("embed.pos_dec").1;
        let mut h = vec![0.0; d];
        let id = token as usize;
        for j in 0..d {
            h[j] = tok[id * d + j] + pos_table[self.pos * d + j];
        }

        for i in 0..cfg.num_dec_layers {
            let ln1 = (
                self.model.params.get(&format!("dec.{i}.ln1.g")).1,
                self.model.params.get(&format!("dec.{i}.ln1.b")).1,
            );
            let normed = layer_norm_rows(&h, 1, d, ln1.0, ln1.1);
            let aw = attn_weights(self.model, &format!("dec.{i}.self_attn"));
            let q = linear(&normed, 1, aw.wq, aw.bq, d, d);
            let k = linear(&normed, 1, aw.wk, aw.bk, d, d);
            let v = linear(&normed, 1, aw.wv, aw.bv, d, d);
            self.self_k[i].extend_from_slice(&k);
            self.self_v[i].extend_from_slice(&v);
            let ctx = attend_row(&q, &self.self_k[i], &self.self_v[i], cfg);
            let out = linear(&ctx, 1, aw.wo, aw.bo, d, d);
            add_into(&mut h, &out);

            let ln2 = (
                self.model.params.get(&format!("dec.{i}.ln2.g")).1,
                self.model.params.get(&format!("dec.{i}.ln2.b")).1,
            );
            let normed = layer_norm_rows(&h, 1, d, ln2.0, ln2.1);
            let caw = attn_weights(self.model, &format!("dec.{i}.cross_attn"));
            let q = linear(&normed, 1, caw.wq, caw.bq, d, d);
            let ctx = attend_row(&q, &self.ctx.cross_k[i], &self.ctx.cross_v[i], cfg);
            let out = linear(&ctx, 1, caw.wo, caw.bo, d, d);
            add_into(&mut h, &out);

            let ln3 = (
                self.model.params.get(&format!("dec.{i}.ln3.g")).1,
                self.model.params.get(&format!("dec.{i}.ln3.b")).1,
            );
            let normed = layer_norm_rows(&h, 1, d, ln3.0, ln3.1);
            let w1 = self.model.params.get(&format!("dec.{i}.ffn.w1")).1;
            let b1 = self.model.params.get(&format!("dec.{i}.ffn.b1")).1;
            let w2 = self.model.params.get(&format!("dec.{i}.ffn.w2")).1;
            let b2 = self.model.params.get(&format!("dec.{i}.ffn.b2")).1;
            let mut ff = linear(&normed, 1, w1, b1, d, cfg.d_ff);
            gelu_all(&mut ff);
            let ff = linear(&ff, 1, w2, b2, cfg.d_ff, d);
            add_into(&mut h, &ff);
        }
        let g = self.model.params.get("dec.final_ln.g").1;
        let b = self.model.params.get("dec.final_ln.b").1;
        let hidden = layer_norm_rows(&h, 1, d, g, b);

        let v = cfg.vocab_size as usize;
        let mut log_probs = vec![0.0; v];
        if cfg.tie_output_embedding {
            let scale = 1.0 / (d as f64).sqrt();
            let scaled: Vec<f64> = hidden.iter().map(|x| x * scale).collect();
            kernels::matmul_nt_acc(&scaled, tok, &mut log_probs, 1, d, v);
        } else {
            let w = self.model.params.get("out.w").1;
            let bo = self.model.params.get("out.b").1;
            log_probs.copy_from_slice(&linear(&hidden, 1, w, bo, d, v));
        }
        kernels::log_softmax_row(&mut log_probs);
        self.pos += 1;
        Ok(StepOut { log_probs, hidden })
    }
}

/// Per-position next-token log-probability rows for a whole target, plus
/// the decoder hidden states.
pub struct TeacherForcedRows {
    /// Row t is the distribution that predicts y[t]; shape len(y) × vocab.
    pub log_prob_rows: Vec<Vec<f64>>,
    /// Hidden states, one row per position of y.
    pub states: Tensor,
}

impl TeacherForcedRows {
    /// Sum of the log-probs assigned to the realized tokens.
    pub fn gathered_log_prob_sum(&self, y: &[u32]) -> f64 {
        y.iter()
            .enumerate()
            .map(|(t, &id)| self.log_prob_rows[t][id as usize])
            .sum()
    }
}

/// Teacher-forced scoring via the incremental path.
pub fn teacher_forced_nograd(model: &Model, x: &TokenSeq, y: &TokenSeq) -> Result<TeacherForcedRows> {
    let ctx = encode_ctx(model, x)?;
    teacher_forced_with_ctx(model, &ctx, y)
}

/// Same, reusing an already-encoded context.
pub fn teacher_forced_with_ctx(
    model: &Model,
    ctx: &EncodedContext,
    y: &TokenSeq,
) -> Result<TeacherForcedRows> {
    if y.is_empty() {
        return Err(Error::EmptyInput("target"));
    }
    if y.len() > model.config.max_dec_len {
        return Err(Error::SequenceTooLong {
            len: y.len(),
            max: model.config.max_dec_len,
        });
    }
    let d = model.config.d_model;
    let mut session = DecoderSession::new(model, ctx);
    let mut rows = Vec::with_capacity(y.len());
    let mut states = Vec::with_capacity(y.len() * d);
    let mut input = BOS_ID;
    for &next in y.ids() {
        let out = session.step(input)?;
        states.extend_from_slice(&out.hidden);
        rows.push(out.log_probs);
        input = next;
    }
    Ok(TeacherForcedRows {
        log_prob_rows: rows,
        states: Tensor::new(vec![y.len(), d], states)?,
    })
}

/// Sequence log-probability via the incremental path.
pub fn sequence_log_prob_nograd(model: &Model, ctx: &EncodedContext, y: &TokenSeq) -> Result<f64> {
    let rows = teacher_forced_with_ctx(model, ctx, y)?;
    Ok(rows.gathered_log_prob_sum(y.ids()))
}

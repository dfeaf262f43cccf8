//! A small transformer encoder-decoder over the autodiff substrate.
//!
//! Two execution paths share the same parameters and the same kernels:
//! the graph path ([`forward`]) records a tape and is what training
//! differentiates; the incremental path ([`infer`]) keeps per-layer KV
//! caches and is what decoding uses. Tests pin their agreement.

mod adam;
mod checkpoint;
pub mod forward;
pub mod infer;
mod params;
mod train;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint};
pub use params::{ParamLayout, Parameters};
pub use train::{mle_objective, mle_train_step};

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::metrics::MetricTriple;
use crate::tensor::Tensor;
use crate::tokens::TokenSeq;

/// Architecture hyper-parameters. PAD/BOS/EOS ids are fixed crate-wide
/// (see [`crate::tokens`]); the vocabulary must leave room for them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: u32,
    pub num_enc_layers: usize,
    pub num_dec_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
    /// Share the token embedding with the output projection.
    pub tie_output_embedding: bool,
    /// MLE label smoothing weight; 0 disables (the default).
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 128,
            num_enc_layers: 2,
            num_dec_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            max_enc_len: 48,
            max_dec_len: 16,
            tie_output_embedding: true,
            label_smoothing: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= crate::tokens::FIRST_TASK_ID {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} must exceed the {} reserved ids",
                self.vocab_size,
                crate::tokens::FIRST_TASK_ID
            )));
        }
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.max_enc_len == 0 || self.max_dec_len == 0 {
            return Err(Error::InvalidConfig("max lengths must be >= 1".into()));
        }
        if self.num_enc_layers == 0 || self.num_dec_layers == 0 || self.d_ff == 0 {
            return Err(Error::InvalidConfig("layer counts and d_ff must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig("label_smoothing must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Decoder output hidden states: one row per decoded token position.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStates {
    pub hidden: Tensor,
}

/// Config plus parameters: everything needed to run the network.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    /// Fresh model with seeded random initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config, seed);
        Ok(Model { config, params })
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Model {
        Model {
            config: ckpt.config.clone(),
            params: ckpt.params.clone(),
        }
    }

    fn check_context(&self, x: &TokenSeq) -> Result<()> {
        if x.is_empty() {
            return Err(Error::EmptyInput("context"));
        }
        if x.len() > self.config.max_enc_len {
            return Err(Error::SequenceTooLong {
                len: x.len(),
                max: self.config.max_enc_len,
            });
        }
        Ok(())
    }

    fn check_target(&self, y: &TokenSeq) -> Result<()> {
        if y.is_empty() {
            return Err(Error::EmptyInput("target"));
        }
        if y.len() > self.config.max_dec_len {
            return Err(Error::SequenceTooLong {
                len: y.len(),
                max: self.config.max_dec_len,
            });
        }
        Ok(())
    }

    /// Encoder memory for a context, shape `len(x) × d_model`.
    pub fn encode(&self, x: &TokenSeq) -> Result<Tensor> {
        self.check_context(x)?;
        let mut g = Graph::new();
        let bound = forward::bind_params(&mut g, &self.params, false);
        let mem = forward::encode_graph(&mut g, &self.config, &bound, x.ids())?;
        Ok(g.value_tensor(mem))
    }

    /// Per-position log-probability rows over the vocabulary (conditioning
    /// causally on the BOS-shifted target) and the decoder hidden states.
    pub fn teacher_forced(&self, x: &TokenSeq, y: &TokenSeq) -> Result<(Tensor, DecoderStates)> {
        self.check_context(x)?;
        self.check_target(y)?;
        let mut g = Graph::new();
        let bound = forward::bind_params(&mut g, &self.params, false);
        let mem = forward::encode_graph(&mut g, &self.config, &bound, x.ids())?;
        let out = forward::decode_graph(&mut g, &self.config, &bound, mem, y.ids())?;
        Ok((
            g.value_tensor(out.log_probs),
            DecoderStates {
                hidden: g.value_tensor(out.states),
            },
        ))
    }

    /// Sum of log-probabilities the model assigns to the tokens of `y`
    /// exactly as given (a trailing EOS, when present, is scored too).
    pub fn sequence_log_prob(&self, x: &TokenSeq, y: &TokenSeq) -> Result<f64> {
        self.check_context(x)?;
        self.check_target(y)?;
        let mut g = Graph::new();
        let bound = forward::bind_params(&mut g, &self.params, false);
        let mem = forward::encode_graph(&mut g, &self.config, &bound, x.ids())?;
        let lp = forward::sequence_log_prob_graph(&mut g, &self.config, &bound, mem, y.ids())?;
        Ok(g.scalar_value(lp))
    }

    /// exp(mean token NLL) over the dataset. Targets are scored with their
    /// trailing EOS appended, matching the training distribution.
    pub fn perplexity(&self, dataset: &[(TokenSeq, TokenSeq)]) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::EmptyInput("perplexity dataset"));
        }
        let mut total_lp = 0.0;
        let mut total_tokens = 0usize;
        for (x, y) in dataset {
            let y = y.with_eos();
            let rows = infer::teacher_forced_nograd(self, x, &y)?;
            total_lp += rows.gathered_log_prob_sum(y.ids());
            total_tokens += y.len();
        }
        Ok((-total_lp / total_tokens as f64).exp())
    }
}

/// Validation metrics attached to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub step: u64,
    pub val_perplexity: f64,
    pub val_rouge: Option<MetricTriple>,
}

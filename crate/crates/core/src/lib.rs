//! Sequence likelihood calibration laboratory.
//!
//! A desk-scale stack for studying how well a sequence model's likelihoods
//! rank its own decoded candidates, and for repairing that ranking by
//! continued training on contrastive sequence-level losses:
//!
//! - [`autodiff`] — reverse-mode AD over dense f64 tensors,
//! - [`model`] — a small transformer encoder-decoder with checkpointing,
//! - [`decode`] — beam search, diverse beam search, nucleus sampling,
//! - [`similarity`] — latent-space span F-measure between sequences,
//! - [`metrics`] — ROUGE-1/2/L, repetition rate, aggregate scores, Kendall τ,
//! - [`calibration`] — ranking/margin/list/expected-reward losses with
//!   cross-entropy or KL regularization toward the frozen starting model,
//! - [`data`] + [`pipeline`] — synthetic tasks, the finetune → decode →
//!   calibrate → evaluate workflow, and its file formats.

pub mod autodiff;
pub mod calibration;
pub mod data;
pub mod decode;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod seeding;
pub mod similarity;
pub mod tensor;
pub mod tokens;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use tokens::TokenSeq;

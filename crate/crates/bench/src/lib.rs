//! Benchmark-only crate; see `benches/kernels.rs`.
//!
//! Shared fixture builders live here so the bench target stays small.

use seqcal_core::model::{Model, ModelConfig};

/// The desk-scale model shape the pipeline presets use.
pub fn preset_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        vocab_size: 128,
        num_enc_layers: 2,
        num_dec_layers: 2,
        d_model: 32,
        num_heads: 4,
        d_ff: 64,
        max_enc_len: 28,
        max_dec_len: 10,
        ..Default::default()
    };
    Model::init(cfg, seed).expect("valid preset config")
}

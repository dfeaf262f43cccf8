//! Inference-compute estimator for encoder-decoder models.
//!
//! Per-token forward costs:
//!
//! ```text
//! C_enc = 2·N_enc + 2·n_enc_layer·n_enc_ctx·d_enc_attn
//! C_dec = 2·N_dec +   n_dec_layer·n_dec_ctx·d_dec_attn
//! total = C_enc·n_enc_ctx + C_dec·n_dec_ctx·m
//! ```
//!
//! The decoder's attention term carries no factor 2: causal masking halves
//! its effective context. Extra per-method decoding arithmetic is omitted
//! as negligible. All arithmetic is exact and checked; overflow is an
//! error, never a silent wrap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsInput {
    /// Non-embedding encoder parameter count.
    pub n_enc_params: u64,
    /// Non-embedding decoder parameter count.
    pub n_dec_params: u64,
    pub num_enc_layers: u64,
    pub num_dec_layers: u64,
    /// Encoder context length in tokens.
    pub enc_ctx: u64,
    /// Decoder context length in tokens.
    pub dec_ctx: u64,
    /// Encoder attention working dimension.
    pub d_enc_attn: u64,
    /// Decoder attention working dimension.
    pub d_dec_attn: u64,
    /// Decoded candidate count m (0 is the encoder-only limit).
    pub num_candidates: u64,
}

impl FlopsInput {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_enc_params", self.n_enc_params),
            ("n_dec_params", self.n_dec_params),
            ("num_enc_layers", self.num_enc_layers),
            ("num_dec_layers", self.num_dec_layers),
            ("enc_ctx", self.enc_ctx),
            ("dec_ctx", self.dec_ctx),
            ("d_enc_attn", self.d_enc_attn),
            ("d_dec_attn", self.d_dec_attn),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

fn mul(a: u128, b: u128) -> Result<u128> {
    a.checked_mul(b).ok_or(Error::Overflow("flops estimate"))
}

fn add(a: u128, b: u128) -> Result<u128> {
    a.checked_add(b).ok_or(Error::Overflow("flops estimate"))
}

/// Total inference FLOPs for decoding m candidates.
pub fn estimate_flops(f: &FlopsInput) -> Result<u128> {
    f.validate()?;
    let c_enc = add(
        2 * f.n_enc_params as u128,
        mul(
            2 * f.num_enc_layers as u128,
            mul(f.enc_ctx as u128, f.d_enc_attn as u128)?,
        )?,
    )?;
    let c_dec = add(
        2 * f.n_dec_params as u128,
        mul(
            f.num_dec_layers as u128,
            mul(f.dec_ctx as u128, f.d_dec_attn as u128)?,
        )?,
    )?;
    let enc_total = mul(c_enc, f.enc_ctx as u128)?;
    let dec_total = mul(mul(c_dec, f.dec_ctx as u128)?, f.num_candidates as u128)?;
    add(enc_total, dec_total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_example(m: u64) -> FlopsInput {
        FlopsInput {
            n_enc_params: 1000,
            n_dec_params: 1000,
            num_enc_layers: 2,
            num_dec_layers: 2,
            enc_ctx: 8,
            dec_ctx: 8,
            d_enc_attn: 4,
            d_dec_attn: 4,
            num_candidates: m,
        }
    }

    #[test]
    fn matches_hand_derivation() {
        // C_enc = 2000 + 2·2·8·4 = 2128; C_dec = 2000 + 2·8·4 = 2064
        // total = 2128·8 + 2064·8·2 = 50048
        assert_eq!(estimate_flops(&hand_example(2)).unwrap(), 50048);
    }

    #[test]
    fn zero_candidates_leaves_encoder_term() {
        assert_eq!(estimate_flops(&hand_example(0)).unwrap(), 2128 * 8);
    }

    #[test]
    fn decoder_term_is_linear_in_m() {
        let base = estimate_flops(&hand_example(0)).unwrap();
        let one = estimate_flops(&hand_example(1)).unwrap();
        let two = estimate_flops(&hand_example(2)).unwrap();
        assert_eq!(two - base, 2 * (one - base));
    }

    #[test]
    fn rejects_zero_dims_and_overflow() {
        let mut f = hand_example(1);
        f.enc_ctx = 0;
        assert!(estimate_flops(&f).is_err());
        let big = FlopsInput {
            n_enc_params: u64::MAX,
            n_dec_params: u64::MAX,
            num_enc_layers: u64::MAX,
            num_dec_layers: u64::MAX,
            enc_ctx: u64::MAX,
            dec_ctx: u64::MAX,
            d_enc_attn: u64::MAX,
            d_dec_attn: u64::MAX,
            num_candidates: u64::MAX,
        };
        assert!(matches!(estimate_flops(&big), Err(Error::Overflow(_))));
    }
}

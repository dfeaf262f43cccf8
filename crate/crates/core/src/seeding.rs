//! Deterministic seed derivation for per-example / per-step RNG streams.

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a base seed with stream labels into one derived seed. Streams
/// with different labels are independent for practical purposes, and the
/// derivation is order-sensitive.
pub fn derive_seed(base: u64, labels: &[u64]) -> u64 {
    let mut acc = mix64(base ^ 0x51c0_ca11_b0a7_ed01);
    for &l in labels {
        acc = mix64(acc ^ mix64(l));
    }
    acc
}

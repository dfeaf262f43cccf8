//! Hot-path benchmarks: the training step, beam decoding, span similarity,
//! and the raw matmul kernel they all sit on.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use seqcal_bench::preset_model;
use seqcal_core::decode::{beam_search, DecodeConfig, DecodeMethod};
use seqcal_core::kernels::matmul_nn;
use seqcal_core::model::{mle_objective, Adam};
use seqcal_core::similarity::{span_similarity, SpanMatchConfig};
use seqcal_core::tokens::TokenSeq;
use seqcal_core::Tensor;

fn random_seq(rng: &mut ChaCha8Rng, len: usize) -> TokenSeq {
    TokenSeq::new((0..len).map(|_| rng.random_range(5..128)).collect())
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..64 * 64).map(|_| rng.random::<f64>()).collect();
    let b: Vec<f64> = (0..64 * 64).map(|_| rng.random::<f64>()).collect();
    c.bench_function("matmul_64x64", |bencher| {
        bencher.iter(|| matmul_nn(black_box(&a), black_box(&b), 64, 64, 64))
    });
}

fn bench_mle_step(c: &mut Criterion) {
    let model = preset_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<(TokenSeq, TokenSeq)> = (0..8)
        .map(|_| (random_seq(&mut rng, 20), random_seq(&mut rng, 6)))
        .collect();
    let mut opt = Adam::new(model.params.values.len());
    let _ = &mut opt;
    c.bench_function("mle_objective_batch8", |bencher| {
        bencher.iter(|| mle_objective(black_box(&model), black_box(&batch)).unwrap())
    });
}

fn bench_beam(c: &mut Criterion) {
    let model = preset_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_seq(&mut rng, 20);
    let cfg = DecodeConfig {
        method: DecodeMethod::Beam,
        num_candidates: 8,
        max_len: 9,
        ..Default::default()
    };
    c.bench_function("beam_search_m8", |bencher| {
        bencher.iter(|| beam_search(black_box(&model), black_box(&x), black_box(&cfg)).unwrap())
    });
}

fn bench_span_similarity(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = |rows: usize| {
        Tensor::new(
            vec![rows, 32],
            (0..rows * 32).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap()
    };
    let a = m(9);
    let b = m(8);
    let cfg = SpanMatchConfig::default();
    c.bench_function("span_similarity_9x8", |bencher| {
        bencher.iter(|| span_similarity(black_box(&a), black_box(&b), black_box(&cfg)).unwrap())
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_mle_step,
    bench_beam,
    bench_span_similarity
);
criterion_main!(benches);

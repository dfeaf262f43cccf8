//! Calibration-objective properties: regularizer oracles, loss identities,
//! permutation consistency, and the calibrate-step update contract.

mod common;

use common::micro_model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqcal_core::calibration::{
    calibrate_objective, calibrate_step, reg_cross_entropy, reg_kl, CalibrationConfig,
    CalibrationExample, CandidateRecord, LossType, RegType, SimilaritySource,
};
use seqcal_core::metrics::MetricTriple;
use seqcal_core::model::{Adam, Model};
use seqcal_core::similarity::SimilarityScore;
use seqcal_core::tokens::TokenSeq;

fn perturbed(model: &Model, scale: f64, seed: u64) -> Model {
    let mut out = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.params.values.iter_mut() {
        *v += (rng.random::<f64>() - 0.5) * scale;
    }
    out
}

#[test]
fn reg_kl_zero_at_theta_ft_and_positive_away() {
    let ft = micro_model(9, 8, 2, 1);
    let x = TokenSeq::new(vec![4, 5]);
    let y = TokenSeq::new(vec![6, 7, 2]);
    let at_anchor = reg_kl(&ft, &ft, &x, &y).unwrap();
    assert!(at_anchor.abs() <= 1e-12, "{at_anchor}");

    let moved = perturbed(&ft, 0.05, 3);
    let away = reg_kl(&moved, &ft, &x, &y).unwrap();
    assert!(away > 0.0, "{away}");
}

#[test]
fn reg_kl_nonnegative_on_random_pairs() {
    for seed in 0..20 {
        let ft = micro_model(7, 8, 2, seed);
        let model = perturbed(&ft, 0.2, seed + 100);
        let x = TokenSeq::new(vec![3, 6]);
        let y = TokenSeq::new(vec![4, 5]);
        let v = reg_kl(&model, &ft, &x, &y).unwrap();
        assert!(v >= -1e-12, "seed {seed}: KL {v}");
    }
}

#[test]
fn reg_kl_matches_hand_summed_oracle() {
    // 2 positions, vocab 4: sum p log(p/q) over all 8 terms directly from
    // teacher-forced rows
    let ft = micro_model(4, 4, 2, 2);
    let model = perturbed(&ft, 0.1, 9);
    let x = TokenSeq::new(vec![3]);
    let y = TokenSeq::new(vec![3, 3]);
    let (rows_p, _) = model.teacher_forced(&x, &y).unwrap();
    let (rows_q, _) = ft.teacher_forced(&x, &y).unwrap();
    let mut oracle = 0.0;
    for t in 0..2 {
        for v in 0..4 {
            let lp = rows_p.at(t, v);
            let lq = rows_q.at(t, v);
            oracle += lp.exp() * (lp - lq);
        }
    }
    let kl = reg_kl(&model, &ft, &x, &y).unwrap();
    assert!((kl - oracle).abs() < 1e-9, "{kl} vs {oracle}");
}

#[test]
fn reg_kl_rejects_config_mismatch() {
    let a = micro_model(9, 8, 2, 1);
    let b = micro_model(9, 4, 2, 1);
    let x = TokenSeq::new(vec![3]);
    let y = TokenSeq::new(vec![4]);
    assert!(reg_kl(&a, &b, &x, &y).is_err());
}

#[test]
fn reg_cross_entropy_uniform_and_identity() {
    // all-zero parameters → exactly uniform over the 4-token vocab
    let mut model = micro_model(4, 8, 2, 0);
    model.params.values.fill(0.0);
    let x = TokenSeq::new(vec![3]);
    let y = TokenSeq::new(vec![3, 3]);
    let ce = reg_cross_entropy(&model, &x, &y).unwrap();
    assert!((ce - 2.0 * 4.0f64.ln()).abs() < 1e-12, "{ce}");

    let model = micro_model(9, 8, 2, 7);
    let x = TokenSeq::new(vec![5, 6]);
    let y = TokenSeq::new(vec![7, 8, 2]);
    let ce = reg_cross_entropy(&model, &x, &y).unwrap();
    assert!(ce >= 0.0);
    let lp = model.sequence_log_prob(&x, &y).unwrap();
    assert!((ce + lp).abs() < 1e-9);
}

fn example_with_sims(sims: &[f64]) -> CalibrationExample {
    let cands = sims
        .iter()
        .enumerate()
        .map(|(i, &s)| CandidateRecord {
            tokens: TokenSeq::new(vec![3 + (i as u32 % 6), 4, 2]),
            ft_log_prob: -1.0 - 0.3 * i as f64,
            similarity: SimilarityScore {
                value: s,
                per_n: Default::default(),
            },
            aux_rouge: Some(MetricTriple {
                rouge1: 40.0 + s,
                rouge2: 20.0,
                rouge_l: 35.0,
            }),
        })
        .collect();
    CalibrationExample {
        context: TokenSeq::new(vec![4, 7]),
        target: TokenSeq::new(vec![5, 6]),
        candidates: cands,
    }
}

#[test]
fn all_losses_are_permutation_consistent() {
    // distinct candidate tokens, distinct sims: shuffling the stored list
    // must not move any loss value
    let model = micro_model(9, 8, 2, 21);
    let ft = model.clone();
    let mut base = example_with_sims(&[3.0, 2.5, 1.2, 0.4]);
    // give each candidate distinct tokens
    for (i, c) in base.candidates.iter_mut().enumerate() {
        c.tokens = TokenSeq::new(vec![3 + i as u32, 8 - i as u32 % 4, 2]);
    }
    let mut shuffled = base.clone();
    shuffled.candidates.swap(0, 3);
    shuffled.candidates.swap(1, 2);

    for loss_type in [
        LossType::Rank,
        LossType::Margin,
        LossType::ListRank,
        LossType::ExpectedReward,
    ] {
        let cfg = CalibrationConfig {
            loss_type,
            beta: 2.0,
            reg_type: RegType::None,
            lambda: 0.0,
            learning_rate: 0.0,
            pairs_per_example: 3,
            similarity_source: SimilaritySource::SpanF,
        };
        let (a, _) = calibrate_objective(&model, &ft, &[base.clone()], &cfg, 5, 17).unwrap();
        let (b, _) = calibrate_objective(&model, &ft, &[shuffled.clone()], &cfg, 5, 17).unwrap();
        assert!(
            (a.cal_loss - b.cal_loss).abs() <= 1e-12,
            "{loss_type:?}: {} vs {}",
            a.cal_loss,
            b.cal_loss
        );
    }
}

#[test]
fn tied_examples_are_skipped_and_reported() {
    let model = micro_model(9, 8, 2, 23);
    let ft = model.clone();
    let tied = example_with_sims(&[1.5, 1.5, 1.5]);
    let cfg = CalibrationConfig {
        loss_type: LossType::Rank,
        reg_type: RegType::None,
        lambda: 0.0,
        learning_rate: 0.0,
        ..Default::default()
    };
    let (stats, grads) = calibrate_objective(&model, &ft, &[tied], &cfg, 0, 0).unwrap();
    assert_eq!(stats.skipped_examples, 1);
    assert_eq!(stats.cal_loss, 0.0);
    assert!(grads.iter().all(|&g| g == 0.0));
}

#[test]
fn zero_lr_calibrate_step_keeps_theta_bit_exact() {
    let mut model = micro_model(9, 8, 2, 29);
    let ft = model.clone();
    let before = model.params.values.clone();
    let mut opt = Adam::new(before.len());
    let cfg = CalibrationConfig {
        learning_rate: 0.0,
        lambda: 0.1,
        ..Default::default()
    };
    let batch = vec![example_with_sims(&[2.0, 1.0])];
    let stats = calibrate_step(&mut model, &mut opt, &ft, &batch, &cfg, 0, 4).unwrap();
    assert_eq!(model.params.values, before);
    assert!(stats.total_loss.is_finite());
}

#[test]
fn lambda_zero_reg_none_reports_zero_reg() {
    let mut model = micro_model(9, 8, 2, 31);
    let ft = model.clone();
    let mut opt = Adam::new(model.params.values.len());
    let cfg = CalibrationConfig {
        reg_type: RegType::None,
        lambda: 0.0,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let batch = vec![example_with_sims(&[2.0, 1.0, 0.5])];
    let stats = calibrate_step(&mut model, &mut opt, &ft, &batch, &cfg, 0, 4).unwrap();
    assert_eq!(stats.reg_loss, 0.0);
    assert!(stats.cal_loss >= 0.0);
}

#[test]
fn rank_calibration_flips_a_misranked_pair() {
    // two candidates, the better-similarity one starts less likely; a few
    // rank steps must swap the likelihood order while KL keeps θ near θ_ft
    let ft = micro_model(9, 8, 2, 37);
    let mut model = ft.clone();
    let x = TokenSeq::new(vec![4, 7]);
    let good = TokenSeq::new(vec![5, 6, 2]);
    let bad = TokenSeq::new(vec![8, 3, 2]);
    let (lp_good, lp_bad) = (
        ft.sequence_log_prob(&x, &good).unwrap(),
        ft.sequence_log_prob(&x, &bad).unwrap(),
    );
    let (good, bad) = if lp_good < lp_bad {
        (good, bad)
    } else {
        (bad, good)
    };
    let example = CalibrationExample {
        context: x.clone(),
        target: TokenSeq::new(vec![5, 6]),
        candidates: vec![
            CandidateRecord {
                tokens: good.clone(),
                ft_log_prob: ft.sequence_log_prob(&x, &good).unwrap(),
                similarity: SimilarityScore {
                    value: 3.0,
                    per_n: Default::default(),
                },
                aux_rouge: None,
            },
            CandidateRecord {
                tokens: bad.clone(),
                ft_log_prob: ft.sequence_log_prob(&x, &bad).unwrap(),
                similarity: SimilarityScore {
                    value: 1.0,
                    per_n: Default::default(),
                },
                aux_rouge: None,
            },
        ],
    };
    let cfg = CalibrationConfig {
        loss_type: LossType::Rank,
        beta: 2.0,
        reg_type: RegType::KlDivergence,
        lambda: 0.1,
        learning_rate: 3e-3,
        pairs_per_example: 1,
        similarity_source: SimilaritySource::SpanF,
    };
    let mut opt = Adam::new(model.params.values.len());
    for step in 0..60 {
        calibrate_step(&mut model, &mut opt, &ft, &[example.clone()], &cfg, step, 8).unwrap();
    }
    let lp_good_after = model.sequence_log_prob(&x, &good).unwrap();
    let lp_bad_after = model.sequence_log_prob(&x, &bad).unwrap();
    assert!(
        lp_good_after > lp_bad_after,
        "calibration failed to reorder: {lp_good_after} vs {lp_bad_after}"
    );
}

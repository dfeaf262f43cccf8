//! Stage 3: continue training the fine-tuned model on the calibration
//! objective over the cached candidate sets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calibration::{calibrate_step, CalibrationExample};
use crate::data::DatasetSplits;
use crate::decode::{DecodeConfig, DecodeMethod};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Adam, Model, ModelCheckpoint};
use crate::seeding::derive_seed;

use super::candidates::{cache_to_examples, read_cache};
use super::config::PipelineConfig;
use super::quality::{build_tau_sets, decode_select_and_score, mean_kendall_tau, TauSet};

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrateLogRow {
    pub step: u64,
    pub cal_loss: f64,
    pub reg_loss: f64,
    /// Geometric-mean ROUGE of the validation decode.
    pub val_quality: f64,
    /// Mean Kendall τ between current log-probs and frozen similarities on
    /// the fixed validation candidate sets.
    pub val_tau: f64,
    /// Share of batch examples skipped for lack of ranking signal, over
    /// the interval.
    pub skipped_pct: f64,
}

#[derive(Debug)]
pub struct CalibrateOutcome {
    pub final_path: PathBuf,
    pub best_quality_path: PathBuf,
    pub log: Vec<CalibrateLogRow>,
    /// τ of the starting (fine-tuned) model on the validation sets.
    pub initial_tau: f64,
    pub final_tau: f64,
    pub steps_run: u64,
}

fn write_log_csv(path: &Path, log: &[CalibrateLogRow]) -> Result<()> {
    let mut out = String::from("step,cal_loss,reg_loss,val_quality,val_tau,skipped_pct\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.cal_loss, r.reg_loss, r.val_quality, r.val_tau, r.skipped_pct
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn val_eval_cfg(cfg: &PipelineConfig) -> DecodeConfig {
    DecodeConfig {
        method: DecodeMethod::Beam,
        num_candidates: cfg.calibration.eval_num_candidates,
        alpha: 0.0,
        max_len: cfg.decode.max_len,
        seed: 0,
        ..Default::default()
    }
}

/// Calibrate θ (initialized from the fine-tuned checkpoint) on the cached
/// candidate sets. Tracks validation quality and likelihood/similarity
/// rank correlation; persists the final and the best-validation-quality
/// checkpoints. The cache must carry the checkpoint id of `ft_ckpt_path`.
pub fn run_calibrate(
    cfg: &PipelineConfig,
    ft_ckpt_path: &Path,
    cache_path: &Path,
    data: &DatasetSplits,
    out_dir: &Path,
) -> Result<CalibrateOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let run = &cfg.calibration;

    let (ft_ckpt, ft_id) = load_checkpoint(ft_ckpt_path)?;
    let records = read_cache(cache_path)?;
    if records.is_empty() {
        return Err(Error::EmptyInput("candidate cache"));
    }
    if let Some(bad) = records.iter().find(|r| r.checkpoint_id != ft_id) {
        return Err(Error::CacheMismatch {
            expected: ft_id,
            found: bad.checkpoint_id.clone(),
        });
    }
    let examples: Vec<CalibrationExample> = cache_to_examples(&records);

    let ft = ft_ckpt.to_model();
    let mut model = ft.clone(); // θ ← θ_ft
    let mut opt = Adam::new(model.params.values.len());
    let objective = run.objective();

    // frozen validation candidate sets for rank-correlation tracking
    let val_subset = &data.val[..data.val.len().min(run.eval_num_examples)];
    let tau_sets: Vec<TauSet> = build_tau_sets(&ft, val_subset, &val_eval_cfg(cfg), &cfg.similarity)?;
    let initial_tau = mean_kendall_tau(&ft, val_subset, &tau_sets)?;

    let final_path = out_dir.join("calibrated_final.ckpt");
    let best_quality_path = out_dir.join("calibrated_best.ckpt");

    let mut log: Vec<CalibrateLogRow> = Vec::new();
    let mut best_quality = f64::NEG_INFINITY;
    let mut intervals_since_best = 0u64;
    let mut interval_cal = 0.0;
    let mut interval_reg = 0.0;
    let mut interval_skipped = 0usize;
    let mut interval_examples = 0usize;
    let mut steps_run = 0u64;
    let mut final_tau = initial_tau;

    let snapshot = |model: &Model, step: u64| -> Result<ModelCheckpoint> {
        let pairs: Vec<_> = val_subset
            .iter()
            .map(|e| (e.context.clone(), e.target.clone()))
            .collect();
        let ppl = model.perplexity(&pairs)?;
        Ok(ModelCheckpoint::from_model(model, step, ppl, None))
    };

    for step in 1..=run.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, &[0xCA11B, step]));
        let batch: Vec<CalibrationExample> = (0..run.batch_size)
            .map(|_| examples[rng.random_range(0..examples.len())].clone())
            .collect();
        let stats = calibrate_step(&mut model, &mut opt, &ft, &batch, &objective, step, run.seed)?;
        interval_cal += stats.cal_loss;
        interval_reg += stats.reg_loss;
        interval_skipped += stats.skipped_examples;
        interval_examples += run.batch_size;
        steps_run = step;

        if step % run.eval_every == 0 || step == run.steps {
            let steps_in_interval = ((step - 1) % run.eval_every + 1) as f64;
            let scored = decode_select_and_score(&model, val_subset, &val_eval_cfg(cfg))?;
            let quality = scored.rouge.geo_mean();
            let tau = mean_kendall_tau(&model, val_subset, &tau_sets)?;
            final_tau = tau;
            log.push(CalibrateLogRow {
                step,
                cal_loss: interval_cal / steps_in_interval,
                reg_loss: interval_reg / steps_in_interval,
                val_quality: quality,
                val_tau: tau,
                skipped_pct: 100.0 * interval_skipped as f64 / interval_examples.max(1) as f64,
            });
            interval_cal = 0.0;
            interval_reg = 0.0;
            interval_skipped = 0;
            interval_examples = 0;

            if quality > best_quality {
                best_quality = quality;
                intervals_since_best = 0;
                let ckpt = snapshot(&model, step)?;
                save_checkpoint(&ckpt, &best_quality_path)?;
            } else {
                intervals_since_best += 1;
                if run.early_stop_patience > 0 && intervals_since_best >= run.early_stop_patience {
                    break;
                }
            }
        }
    }

    // zero-step runs still persist θ_ft verbatim
    if run.steps == 0 {
        let ckpt = ModelCheckpoint::from_model(&model, 0, ft_ckpt.val_perplexity, ft_ckpt.val_rouge);
        save_checkpoint(&ckpt, &final_path)?;
        if !best_quality_path.exists() {
            save_checkpoint(&ckpt, &best_quality_path)?;
        }
    } else {
        let ckpt = snapshot(&model, steps_run)?;
        save_checkpoint(&ckpt, &final_path)?;
    }

    write_log_csv(&out_dir.join("calibrate_log.csv"), &log)?;
    Ok(CalibrateOutcome {
        final_path,
        best_quality_path,
        log,
        initial_tau,
        final_tau,
        steps_run,
    })
}

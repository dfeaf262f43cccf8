//! Stage 1: MLE fine-tuning with periodic validation and dual checkpoint
//! retention (perplexity-best and ROUGE-best).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{as_pairs, DatasetSplits, Example};
use crate::decode::{DecodeConfig, DecodeMethod};
use crate::error::Result;
use crate::metrics::MetricTriple;
use crate::model::{mle_train_step, save_checkpoint, Adam, Model, ModelCheckpoint};
use crate::seeding::derive_seed;

use super::config::{CheckpointSelection, PipelineConfig};
use super::quality::{decode_select_and_score, token_accuracy};

/// One validation snapshot in the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneLogRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_perplexity: f64,
    pub val_rouge: MetricTriple,
    pub val_token_accuracy: f64,
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub final_path: PathBuf,
    pub best_ppl_path: PathBuf,
    pub best_rouge_path: PathBuf,
    /// Copy of the checkpoint preferred by the configured selection policy.
    pub selected_path: PathBuf,
    pub selected_id: String,
    pub log: Vec<FinetuneLogRow>,
    /// Per-step training losses (step 1 first).
    pub step_losses: Vec<f64>,
}

/// The batch drawn at a given step — a pure function of (len, batch size,
/// seed, step), so training can resume from any checkpoint and reproduce
/// the continuation exactly.
pub fn batch_for_step(num_examples: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xBA7C, step]));
    (0..batch_size)
        .map(|_| rng.random_range(0..num_examples))
        .collect()
}

fn greedy_eval_cfg(cfg: &PipelineConfig) -> DecodeConfig {
    DecodeConfig {
        method: DecodeMethod::Beam,
        num_candidates: 1,
        alpha: 0.0,
        max_len: cfg.decode.max_len,
        seed: 0,
        ..Default::default()
    }
}

fn eval_model(
    cfg: &PipelineConfig,
    model: &Model,
    val: &[Example],
    step: u64,
    train_loss: f64,
) -> Result<FinetuneLogRow> {
    let subset = &val[..val.len().min(cfg.finetune.eval_num_examples)];
    let pairs = as_pairs(subset);
    let val_perplexity = model.perplexity(&pairs)?;
    let scored = decode_select_and_score(model, subset, &greedy_eval_cfg(cfg))?;
    let val_token_accuracy = token_accuracy(model, subset)?;
    Ok(FinetuneLogRow {
        step,
        train_loss,
        val_perplexity,
        val_rouge: scored.rouge,
        val_token_accuracy,
    })
}

fn write_log_csv(path: &Path, log: &[FinetuneLogRow]) -> Result<()> {
    let mut out =
        String::from("step,train_loss,val_perplexity,val_rouge1,val_rouge2,val_rouge_l,val_token_accuracy\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step,
            r.train_loss,
            r.val_perplexity,
            r.val_rouge.rouge1,
            r.val_rouge.rouge2,
            r.val_rouge.rouge_l,
            r.val_token_accuracy
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Fine-tune from random initialization; retain the perplexity-best, the
/// ROUGE-best (geometric mean), and the final checkpoints.
pub fn run_finetune(
    cfg: &PipelineConfig,
    data: &DatasetSplits,
    out_dir: &Path,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let ft = &cfg.finetune;
    let mut model = Model::init(cfg.model.clone(), ft.seed)?;
    let mut opt = Adam::new(model.params.values.len());
    let pairs = as_pairs(&data.train);

    let best_ppl_path = out_dir.join("best_ppl.ckpt");
    let best_rouge_path = out_dir.join("best_rouge.ckpt");
    let final_path = out_dir.join("final.ckpt");
    let selected_path = out_dir.join("selected.ckpt");

    let mut log: Vec<FinetuneLogRow> = Vec::new();
    let mut step_losses = Vec::with_capacity(ft.steps as usize);
    let mut best_ppl = f64::INFINITY;
    let mut best_rouge = f64::NEG_INFINITY;
    let mut last_loss = f64::NAN;

    let evaluate_and_retain = |model: &Model,
                                   step: u64,
                                   train_loss: f64,
                                   best_ppl: &mut f64,
                                   best_rouge: &mut f64,
                                   log: &mut Vec<FinetuneLogRow>|
     -> Result<()> {
        let row = eval_model(cfg, model, &data.val, step, train_loss)?;
        if row.val_perplexity < *best_ppl {
            *best_ppl = row.val_perplexity;
            let ckpt = ModelCheckpoint::from_model(model, step, row.val_perplexity, Some(row.val_rouge));
            save_checkpoint(&ckpt, &best_ppl_path)?;
        }
        let geo = row.val_rouge.geo_mean();
        if geo > *best_rouge {
            *best_rouge = geo;
            let ckpt = ModelCheckpoint::from_model(model, step, row.val_perplexity, Some(row.val_rouge));
            save_checkpoint(&ckpt, &best_rouge_path)?;
        }
        log.push(row);
        Ok(())
    };

    for step in 1..=ft.steps {
        let idx = batch_for_step(pairs.len(), ft.batch_size, ft.seed, step);
        let batch: Vec<_> = idx.iter().map(|&i| pairs[i].clone()).collect();
        last_loss = mle_train_step(&mut model, &mut opt, &batch, ft.learning_rate, step)?;
        step_losses.push(last_loss);
        if step % ft.eval_every == 0 {
            evaluate_and_retain(&model, step, last_loss, &mut best_ppl, &mut best_rouge, &mut log)?;
        }
    }
    if ft.steps % ft.eval_every != 0 || ft.steps == 0 {
        evaluate_and_retain(&model, ft.steps, last_loss, &mut best_ppl, &mut best_rouge, &mut log)?;
    }

    let last = log.last().expect("at least one evaluation");
    let final_ckpt = ModelCheckpoint::from_model(&model, ft.steps, last.val_perplexity, Some(last.val_rouge));
    save_checkpoint(&final_ckpt, &final_path)?;

    let source = match ft.selection {
        CheckpointSelection::Perplexity => &best_ppl_path,
        CheckpointSelection::Rouge => &best_rouge_path,
    };
    fs::copy(source, &selected_path)?;
    let selected_id = crate::model::load_checkpoint(&selected_path)?.1;

    write_log_csv(&out_dir.join("finetune_log.csv"), &log)?;
    Ok(FinetuneOutcome {
        final_path,
        best_ppl_path,
        best_rouge_path,
        selected_path,
        selected_id,
        log,
        step_losses,
    })
}

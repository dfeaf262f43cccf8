//! `seqcal` — the sequence likelihood calibration workbench.
//!
//! Stages: `gen-data` → `finetune` → `decode-candidates` → `calibrate` →
//! `evaluate`, plus a standalone `flops` estimator. Every stage is driven
//! by one JSON config file and a seed; outputs are deterministic.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqcal_core::data::{generate_dataset, read_split, write_split, DatasetSplits};
use seqcal_core::error::{Error, Result};
use seqcal_core::pipeline::{
    estimate_flops, run_calibrate, run_decode_candidates, run_evaluate, run_finetune, FlopsInput,
    PipelineConfig,
};

#[derive(Parser)]
#[command(
    name = "seqcal",
    about = "Fine-tune, decode, calibrate and evaluate a small seq2seq model on synthetic tasks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Pipeline config file (JSON). Missing keys fall back to defaults;
    /// unknown keys are an error.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the seed of the stage being run.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long)]
    out: PathBuf,

    /// Replace outputs that already exist.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val/test splits.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// MLE fine-tuning; retains perplexity-best, ROUGE-best and final
    /// checkpoints.
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding train.jsonl / val.jsonl / test.jsonl.
        #[arg(long)]
        data: PathBuf,
    },
    /// Decode candidate sets from a checkpoint and label them.
    DecodeCandidates {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to decode from.
        #[arg(long)]
        ckpt: PathBuf,
        /// Which split to decode.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Continue training on the calibration objective.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// The fine-tuned checkpoint θ_ft.
        #[arg(long)]
        ckpt: PathBuf,
        /// Candidate cache produced by decode-candidates from that
        /// checkpoint.
        #[arg(long)]
        cache: PathBuf,
    },
    /// Decode-quality sweeps, α sensitivity, rank correlation, summary.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoints as label=path; repeat the flag. Pass the fine-tuned
        /// model first: it anchors α* selection and the τ candidate sets.
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<String>,
    },
    /// Estimate inference FLOPs for an encoder-decoder.
    Flops {
        #[arg(long)]
        n_enc_params: u64,
        #[arg(long)]
        n_dec_params: u64,
        #[arg(long)]
        enc_layers: u64,
        #[arg(long)]
        dec_layers: u64,
        #[arg(long)]
        enc_ctx: u64,
        #[arg(long)]
        dec_ctx: u64,
        #[arg(long)]
        d_enc_attn: u64,
        #[arg(long)]
        d_dec_attn: u64,
        /// Number of decoded candidates m.
        #[arg(long)]
        candidates: u64,
    },
}

fn load_config(common: &CommonArgs) -> Result<PipelineConfig> {
    match &common.config {
        Some(path) => PipelineConfig::load(path),
        None => {
            let cfg = PipelineConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn load_splits(dir: &Path, vocab_size: u32) -> Result<DatasetSplits> {
    let read = |name: &str| -> Result<_> {
        let split = read_split(&dir.join(name))?;
        seqcal_core::data::validate_examples(&split, vocab_size)?;
        Ok(split)
    };
    Ok(DatasetSplits {
        train: read("train.jsonl")?,
        val: read("val.jsonl")?,
        test: read("test.jsonl")?,
    })
}

fn refuse_existing(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::WouldOverwrite(path.display().to_string()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.task.seed = seed;
            }
            std::fs::create_dir_all(&common.out)?;
            let train_path = common.out.join("train.jsonl");
            refuse_existing(&train_path, common.overwrite)?;
            let data = generate_dataset(&cfg.task, cfg.model.max_dec_len)?;
            write_split(&train_path, &data.train)?;
            write_split(&common.out.join("val.jsonl"), &data.val)?;
            write_split(&common.out.join("test.jsonl"), &data.test)?;
            println!(
                "gen-data: wrote {} train / {} val / {} test examples to {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                common.out.display()
            );
        }
        Command::Finetune { common, data } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.finetune.seed = seed;
            }
            refuse_existing(&common.out.join("selected.ckpt"), common.overwrite)?;
            let splits = load_splits(&data, cfg.model.vocab_size)?;
            let outcome = run_finetune(&cfg, &splits, &common.out)?;
            let last = outcome.log.last().expect("log has rows");
            println!(
                "finetune: {} steps, val ppl {:.4}, val ROUGE-L {:.2}, token acc {:.4}",
                cfg.finetune.steps, last.val_perplexity, last.val_rouge.rouge_l, last.val_token_accuracy
            );
            println!("finetune: selected checkpoint {}", outcome.selected_path.display());
        }
        Command::DecodeCandidates {
            common,
            data,
            ckpt,
            split,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.decode.seed = seed;
            }
            let splits = load_splits(&data, cfg.model.vocab_size)?;
            let examples = match split.as_str() {
                "train" => &splits.train,
                "val" => &splits.val,
                "test" => &splits.test,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown split {other:?} (expected train|val|test)"
                    )))
                }
            };
            std::fs::create_dir_all(&common.out)?;
            let out_path = common.out.join("candidates.jsonl");
            let report = run_decode_candidates(
                &ckpt,
                examples,
                &cfg.decode,
                &cfg.similarity,
                &out_path,
                common.overwrite,
            )?;
            println!(
                "decode-candidates: {} examples, {} candidates ({} sets short of m) -> {}",
                report.num_examples,
                report.total_candidates,
                report.short_sets,
                out_path.display()
            );
        }
        Command::Calibrate {
            common,
            data,
            ckpt,
            cache,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.calibration.seed = seed;
            }
            refuse_existing(&common.out.join("calibrated_final.ckpt"), common.overwrite)?;
            let splits = load_splits(&data, cfg.model.vocab_size)?;
            let outcome = run_calibrate(&cfg, &ckpt, &cache, &splits, &common.out)?;
            println!(
                "calibrate: {} steps, val τ {:.4} -> {:.4}",
                outcome.steps_run, outcome.initial_tau, outcome.final_tau
            );
            println!("calibrate: final checkpoint {}", outcome.final_path.display());
        }
        Command::Evaluate {
            common,
            data,
            ckpts,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.evaluate.seed = seed;
            }
            refuse_existing(&common.out.join("summary.csv"), common.overwrite)?;
            let mut labeled = Vec::new();
            for spec in &ckpts {
                let (label, path) = spec.split_once('=').ok_or_else(|| {
                    Error::InvalidConfig(format!("--ckpt expects label=path, got {spec:?}"))
                })?;
                labeled.push((label.to_string(), PathBuf::from(path)));
            }
            let splits = load_splits(&data, cfg.model.vocab_size)?;
            let report = run_evaluate(&cfg, &labeled, &splits, &common.out)?;
            println!("evaluate: α* = {}", report.alpha_star);
            for row in &report.summary {
                println!(
                    "evaluate: {} ROUGE {:.2}/{:.2}/{:.2} rep% {:.2} τ {:.4} ppl {:.4}",
                    row.checkpoint, row.rouge1, row.rouge2, row.rouge_l, row.rep_pct, row.mean_tau,
                    row.perplexity
                );
            }
            println!("evaluate: reports in {}", common.out.display());
        }
        Command::Flops {
            n_enc_params,
            n_dec_params,
            enc_layers,
            dec_layers,
            enc_ctx,
            dec_ctx,
            d_enc_attn,
            d_dec_attn,
            candidates,
        } => {
            let input = FlopsInput {
                n_enc_params,
                n_dec_params,
                num_enc_layers: enc_layers,
                num_dec_layers: dec_layers,
                enc_ctx,
                dec_ctx,
                d_enc_attn,
                d_dec_attn,
                num_candidates: candidates,
            };
            let total = estimate_flops(&input)?;
            println!("{total}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

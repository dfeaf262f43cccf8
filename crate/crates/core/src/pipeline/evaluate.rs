//! Stage 4: the evaluation harness.
//!
//! Sweeps checkpoints × decoding method × candidate count × α ∈ {0, α*},
//! reporting mean ROUGE of the selected candidates, repetition rate, and
//! the likelihood/similarity rank correlation on fixed candidate sets. α*
//! is chosen per run by the first checkpoint's validation ROUGE over the
//! configured positive grid — the convention is to pass the fine-tuned
//! checkpoint first.
//!
//! Everything lands in four CSV files (decode_curves, alpha_sensitivity,
//! kendall_tau, summary); each row carries the checkpoint id and the
//! decode settings that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{as_pairs, DatasetSplits, Example};
use crate::decode::{DecodeConfig, DecodeMethod};
use crate::error::{Error, Result};
use crate::metrics::repetition_rate;
use crate::model::{load_checkpoint, Model};

use super::config::PipelineConfig;
use super::quality::{
    build_tau_sets, decode_select_and_score, mean_kendall_tau, REP_MAX_N,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub checkpoint: String,
    pub checkpoint_id: String,
    pub method: DecodeMethod,
    pub num_candidates: usize,
    pub alpha: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub r_geo: f64,
    pub rep_pct: f64,
    pub num_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub checkpoint: String,
    pub checkpoint_id: String,
    pub num_candidates: usize,
    pub alpha_star: f64,
    pub rouge_l_alpha0: f64,
    pub rouge_l_alpha_star: f64,
    pub abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub checkpoint: String,
    pub checkpoint_id: String,
    pub mean_tau: f64,
    pub num_examples: usize,
    pub num_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub checkpoint: String,
    pub checkpoint_id: String,
    pub perplexity: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub r_geo: f64,
    pub rep_pct: f64,
    pub mean_tau: f64,
    /// rep% of the reference targets themselves.
    pub reference_rep_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub alpha_star: f64,
    pub curves: Vec<CurveRow>,
    pub alpha_rows: Vec<AlphaRow>,
    pub tau_rows: Vec<TauRow>,
    pub summary: Vec<SummaryRow>,
}

impl EvalReport {
    pub fn curve(
        &self,
        checkpoint: &str,
        method: DecodeMethod,
        num_candidates: usize,
        alpha: f64,
    ) -> Option<&CurveRow> {
        self.curves.iter().find(|r| {
            r.checkpoint == checkpoint
                && r.method == method
                && r.num_candidates == num_candidates
                && r.alpha == alpha
        })
    }
}

fn method_cfg(cfg: &PipelineConfig, method: DecodeMethod, m: usize, alpha: f64) -> DecodeConfig {
    DecodeConfig {
        method,
        num_candidates: m,
        alpha,
        nucleus_p: cfg.evaluate.nucleus_p,
        temperature: cfg.evaluate.temperature,
        // diverse-beam sweeps reuse the candidate-decoding grouping
        num_groups: if m % cfg.decode.num_groups == 0 {
            cfg.decode.num_groups
        } else {
            1
        },
        diversity_penalty: cfg.decode.diversity_penalty,
        max_len: cfg.evaluate.max_len,
        seed: cfg.evaluate.seed,
    }
}

/// Pick α* by the scoring model's validation ROUGE (geometric mean) over
/// the positive grid; deterministic tie-break toward the smaller α.
fn select_alpha_star(cfg: &PipelineConfig, scorer: &Model, val: &[Example]) -> Result<f64> {
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for &alpha in &cfg.evaluate.alpha_grid {
        let decode_cfg = method_cfg(
            cfg,
            DecodeMethod::Beam,
            cfg.evaluate.selection_num_candidates,
            alpha,
        );
        let scored = decode_select_and_score(scorer, val, &decode_cfg)?;
        let quality = scored.rouge.geo_mean();
        if quality > best.0 || (quality == best.0 && alpha < best.1) {
            best = (quality, alpha);
        }
    }
    Ok(best.1)
}

/// Evaluate the given (label, checkpoint path) pairs on the test split.
pub fn run_evaluate(
    cfg: &PipelineConfig,
    checkpoints: &[(String, PathBuf)],
    data: &DatasetSplits,
    out_dir: &Path,
) -> Result<EvalReport> {
    cfg.validate()?;
    if checkpoints.is_empty() {
        return Err(Error::EmptyInput("evaluate checkpoints"));
    }
    fs::create_dir_all(out_dir)?;

    let mut models: Vec<(String, String, Model)> = Vec::new();
    for (label, path) in checkpoints {
        let (ckpt, id) = load_checkpoint(path)?;
        models.push((label.clone(), id, ckpt.to_model()));
    }

    let alpha_star = select_alpha_star(cfg, &models[0].2, &data.val)?;

    // decode curves over the test split
    let mut curves = Vec::new();
    for (label, id, model) in &models {
        for &method in &cfg.evaluate.methods {
            for &m in &cfg.evaluate.num_candidates_grid {
                for alpha in [0.0, alpha_star] {
                    let decode_cfg = method_cfg(cfg, method, m, alpha);
                    let scored = decode_select_and_score(model, &data.test, &decode_cfg)?;
                    curves.push(CurveRow {
                        checkpoint: label.clone(),
                        checkpoint_id: id.clone(),
                        method,
                        num_candidates: m,
                        alpha,
                        rouge1: scored.rouge.rouge1,
                        rouge2: scored.rouge.rouge2,
                        rouge_l: scored.rouge.rouge_l,
                        r_geo: scored.rouge.geo_mean(),
                        rep_pct: scored.rep_pct,
                        num_examples: data.test.len(),
                    });
                }
            }
        }
    }

    // α sensitivity at the selection beam width
    let mut alpha_rows = Vec::new();
    let m_sel = cfg.evaluate.selection_num_candidates;
    for (label, id, model) in &models {
        let mut rouge_l = [0.0; 2];
        for (slot, alpha) in [0.0, alpha_star].into_iter().enumerate() {
            let row = curves.iter().find(|r| {
                r.checkpoint == *label
                    && r.method == DecodeMethod::Beam
                    && r.num_candidates == m_sel
                    && r.alpha == alpha
            });
            rouge_l[slot] = match row {
                Some(r) => r.rouge_l,
                None => {
                    let decode_cfg = method_cfg(cfg, DecodeMethod::Beam, m_sel, alpha);
                    decode_select_and_score(model, &data.test, &decode_cfg)?
                        .rouge
                        .rouge_l
                }
            };
        }
        alpha_rows.push(AlphaRow {
            checkpoint: label.clone(),
            checkpoint_id: id.clone(),
            num_candidates: m_sel,
            alpha_star,
            rouge_l_alpha0: rouge_l[0],
            rouge_l_alpha_star: rouge_l[1],
            abs_diff: (rouge_l[0] - rouge_l[1]).abs(),
        });
    }

    // rank correlation on fixed candidate sets decoded from the first
    // checkpoint
    let tau_subset = &data.test[..data.test.len().min(cfg.evaluate.tau_num_examples)];
    let tau_decode = method_cfg(
        cfg,
        DecodeMethod::Beam,
        cfg.evaluate.tau_num_candidates,
        0.0,
    );
    let tau_sets = build_tau_sets(&models[0].2, tau_subset, &tau_decode, &cfg.similarity)?;
    let mut tau_rows = Vec::new();
    for (label, id, model) in &models {
        let mean_tau = mean_kendall_tau(model, tau_subset, &tau_sets)?;
        tau_rows.push(TauRow {
            checkpoint: label.clone(),
            checkpoint_id: id.clone(),
            mean_tau,
            num_examples: tau_subset.len(),
            num_candidates: cfg.evaluate.tau_num_candidates,
        });
    }

    // summary
    let reference_rep_pct = repetition_rate(
        &data.test.iter().map(|e| e.target.content()).collect::<Vec<_>>(),
        REP_MAX_N,
    )?;
    let mut summary = Vec::new();
    for ((label, id, model), tau_row) in models.iter().zip(&tau_rows) {
        let base = curves
            .iter()
            .find(|r| {
                r.checkpoint == *label
                    && r.method == DecodeMethod::Beam
                    && r.num_candidates == m_sel
                    && r.alpha == 0.0
            })
            .cloned();
        let base = match base {
            Some(r) => r,
            None => {
                let decode_cfg = method_cfg(cfg, DecodeMethod::Beam, m_sel, 0.0);
                let scored = decode_select_and_score(model, &data.test, &decode_cfg)?;
                CurveRow {
                    checkpoint: label.clone(),
                    checkpoint_id: id.clone(),
                    method: DecodeMethod::Beam,
                    num_candidates: m_sel,
                    alpha: 0.0,
                    rouge1: scored.rouge.rouge1,
                    rouge2: scored.rouge.rouge2,
                    rouge_l: scored.rouge.rouge_l,
                    r_geo: scored.rouge.geo_mean(),
                    rep_pct: scored.rep_pct,
                    num_examples: data.test.len(),
                }
            }
        };
        let perplexity = model.perplexity(&as_pairs(&data.test))?;
        summary.push(SummaryRow {
            checkpoint: label.clone(),
            checkpoint_id: id.clone(),
            perplexity,
            rouge1: base.rouge1,
            rouge2: base.rouge2,
            rouge_l: base.rouge_l,
            r_geo: base.r_geo,
            rep_pct: base.rep_pct,
            mean_tau: tau_row.mean_tau,
            reference_rep_pct,
        });
    }

    let report = EvalReport {
        alpha_star,
        curves,
        alpha_rows,
        tau_rows,
        summary,
    };
    write_report_csvs(&report, out_dir)?;
    Ok(report)
}

fn method_name(m: DecodeMethod) -> &'static str {
    match m {
        DecodeMethod::Beam => "beam",
        DecodeMethod::DiverseBeam => "diverse_beam",
        DecodeMethod::Nucleus => "nucleus",
    }
}

pub fn write_report_csvs(report: &EvalReport, out_dir: &Path) -> Result<()> {
    let mut curves = String::from(
        "checkpoint,checkpoint_id,method,num_candidates,alpha,rouge1,rouge2,rouge_l,r_geo,rep_pct,num_examples\n",
    );
    for r in &report.curves {
        curves.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.checkpoint,
            r.checkpoint_id,
            method_name(r.method),
            r.num_candidates,
            r.alpha,
            r.rouge1,
            r.rouge2,
            r.rouge_l,
            r.r_geo,
            r.rep_pct,
            r.num_examples
        ));
    }
    fs::write(out_dir.join("decode_curves.csv"), curves)?;

    let mut alpha = String::from(
        "checkpoint,checkpoint_id,num_candidates,alpha_star,rouge_l_alpha0,rouge_l_alpha_star,abs_diff\n",
    );
    for r in &report.alpha_rows {
        alpha.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.checkpoint,
            r.checkpoint_id,
            r.num_candidates,
            r.alpha_star,
            r.rouge_l_alpha0,
            r.rouge_l_alpha_star,
            r.abs_diff
        ));
    }
    fs::write(out_dir.join("alpha_sensitivity.csv"), alpha)?;

    let mut tau = String::from("checkpoint,checkpoint_id,mean_tau,num_examples,num_candidates\n");
    for r in &report.tau_rows {
        tau.push_str(&format!(
            "{},{},{},{},{}\n",
            r.checkpoint, r.checkpoint_id, r.mean_tau, r.num_examples, r.num_candidates
        ));
    }
    fs::write(out_dir.join("kendall_tau.csv"), tau)?;

    let mut summary = String::from(
        "checkpoint,checkpoint_id,perplexity,rouge1,rouge2,rouge_l,r_geo,rep_pct,mean_tau,reference_rep_pct\n",
    );
    for r in &report.summary {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.checkpoint,
            r.checkpoint_id,
            r.perplexity,
            r.rouge1,
            r.rouge2,
            r.rouge_l,
            r.r_geo,
            r.rep_pct,
            r.mean_tau,
            r.reference_rep_pct
        ));
    }
    fs::write(out_dir.join("summary.csv"), summary)?;
    Ok(())
}

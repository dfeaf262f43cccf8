//! The pipeline's JSON configuration file.
//!
//! One document with sections {model, task, finetune, decode, similarity,
//! calibration, evaluate}. Every key has a default (the desk-scale
//! salient_copy preset); unknown keys are a hard error.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationConfig, LossType, RegType, SimilaritySource};
use crate::data::SyntheticTaskSpec;
use crate::decode::{DecodeConfig, DecodeMethod};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::similarity::SpanMatchConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelection {
    Perplexity,
    Rouge,
}

/// Fine-tuning stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Validation cadence in steps.
    pub eval_every: u64,
    /// Which retained checkpoint downstream stages should prefer.
    pub selection: CheckpointSelection,
    /// Validation examples used for perplexity/ROUGE (capped at the split).
    pub eval_num_examples: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 1200,
            batch_size: 64,
            learning_rate: 1e-3,
            eval_every: 150,
            selection: CheckpointSelection::Perplexity,
            eval_num_examples: 256,
            seed: 1,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig(
                "finetune batch_size and eval_every must be >= 1".into(),
            ));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("finetune learning_rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Calibration stage settings: the objective plus the run schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateRunConfig {
    pub loss_type: LossType,
    pub beta: f64,
    pub reg_type: RegType,
    pub lambda: f64,
    pub learning_rate: f64,
    pub pairs_per_example: usize,
    pub similarity_source: SimilaritySource,
    pub steps: u64,
    pub batch_size: usize,
    /// Validation cadence in steps.
    pub eval_every: u64,
    /// Stop after this many validation intervals without an aggregate-ROUGE
    /// improvement (0 disables early stopping).
    pub early_stop_patience: u64,
    /// Validation examples scored per interval.
    pub eval_num_examples: usize,
    /// Beam width for the validation quality decode.
    pub eval_num_candidates: usize,
    pub seed: u64,
}

impl Default for CalibrateRunConfig {
    fn default() -> Self {
        let core = CalibrationConfig::default();
        CalibrateRunConfig {
            loss_type: core.loss_type,
            beta: core.beta,
            reg_type: core.reg_type,
            lambda: core.lambda,
            learning_rate: core.learning_rate,
            pairs_per_example: core.pairs_per_example,
            similarity_source: core.similarity_source,
            steps: 600,
            batch_size: 8,
            eval_every: 100,
            early_stop_patience: 0,
            eval_num_examples: 128,
            eval_num_candidates: 5,
            seed: 1,
        }
    }
}

impl CalibrateRunConfig {
    pub fn objective(&self) -> CalibrationConfig {
        CalibrationConfig {
            loss_type: self.loss_type,
            beta: self.beta,
            reg_type: self.reg_type,
            lambda: self.lambda,
            learning_rate: self.learning_rate,
            pairs_per_example: self.pairs_per_example,
            similarity_source: self.similarity_source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective().validate()?;
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_num_candidates == 0 {
            return Err(Error::InvalidConfig(
                "calibration batch_size, eval_every and eval_num_candidates must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Evaluation stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Decoding methods to sweep.
    pub methods: Vec<DecodeMethod>,
    /// Candidate counts per method.
    pub num_candidates_grid: Vec<usize>,
    /// Positive length-normalization exponents considered for α*; α = 0 is
    /// always evaluated alongside.
    pub alpha_grid: Vec<f64>,
    /// Candidate count for α* selection and the summary row.
    pub selection_num_candidates: usize,
    pub max_len: usize,
    pub nucleus_p: f64,
    pub temperature: f64,
    /// Examples used for the likelihood/quality rank-correlation table.
    pub tau_num_examples: usize,
    /// Candidate count for the rank-correlation table.
    pub tau_num_candidates: usize,
    pub seed: u64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            methods: vec![DecodeMethod::Beam],
            num_candidates_grid: vec![1, 2, 5, 10, 20],
            alpha_grid: vec![0.5, 1.0, 2.0],
            selection_num_candidates: 5,
            max_len: 16,
            nucleus_p: 0.95,
            temperature: 1.0,
            tau_num_examples: 256,
            tau_num_candidates: 8,
            seed: 1,
        }
    }
}

impl EvaluateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.num_candidates_grid.is_empty() {
            return Err(Error::InvalidConfig(
                "evaluate needs at least one method and one candidate count".into(),
            ));
        }
        if self.num_candidates_grid.iter().any(|&m| m == 0) || self.selection_num_candidates == 0 {
            return Err(Error::InvalidConfig("candidate counts must be >= 1".into()));
        }
        if self.alpha_grid.iter().any(|&a| a <= 0.0) {
            return Err(Error::InvalidConfig(
                "alpha_grid entries must be > 0 (α = 0 is always included)".into(),
            ));
        }
        if self.tau_num_examples == 0 || self.tau_num_candidates < 2 {
            return Err(Error::InvalidConfig(
                "tau table needs >= 1 example and >= 2 candidates".into(),
            ));
        }
        Ok(())
    }
}

/// The whole config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub task: SyntheticTaskSpec,
    pub finetune: FinetuneConfig,
    pub decode: DecodeConfig,
    pub similarity: SpanMatchConfig,
    pub calibration: CalibrateRunConfig,
    pub evaluate: EvaluateConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.finetune.validate()?;
        self.decode.validate()?;
        self.similarity.validate()?;
        self.calibration.validate()?;
        self.evaluate.validate()?;
        if self.task.vocab_size != self.model.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "task.vocab_size {} != model.vocab_size {}",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        if self.task.input_len_max > self.model.max_enc_len {
            return Err(Error::InvalidConfig(format!(
                "task.input_len_max {} exceeds model.max_enc_len {}",
                self.task.input_len_max, self.model.max_enc_len
            )));
        }
        for (name, len) in [("decode", self.decode.max_len), ("evaluate", self.evaluate.max_len)] {
            if len > self.model.max_dec_len {
                return Err(Error::InvalidConfig(format!(
                    "{name}.max_len {len} exceeds model.max_dec_len {}",
                    self.model.max_dec_len
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path)?;
        let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

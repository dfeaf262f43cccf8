//! The three-stage workflow (finetune → decode-candidates → calibrate),
//! the evaluation harness, synthetic data plumbing, and the inference
//! FLOPs estimator. Every stage is a pure function of (input files,
//! config, seed): re-running one reproduces its outputs bit-exactly.

pub mod calibrate;
pub mod candidates;
pub mod config;
pub mod evaluate;
pub mod finetune;
pub mod flops;
pub mod quality;

pub use calibrate::{run_calibrate, CalibrateOutcome};
pub use candidates::{
    cache_to_examples, read_cache, run_decode_candidates, CacheCandidate, CacheRecord,
    DecodeCandidatesReport,
};
pub use config::{CheckpointSelection, PipelineConfig};
pub use evaluate::{run_evaluate, EvalReport};
pub use finetune::{batch_for_step, run_finetune, FinetuneOutcome};
pub use flops::{estimate_flops, FlopsInput};

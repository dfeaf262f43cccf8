//! Synthetic sequence-to-sequence tasks and dataset files.
//!
//! Two generators stand in for real corpora:
//!
//! - `salient_copy`: the context is several separator-delimited token
//!   groups, exactly one prefixed by a KEY marker; the target is that group.
//!   Extractive and shorter than its input, like a summary.
//! - `sorted_unique`: the target is the context's distinct tokens in
//!   ascending id order — many near-miss candidates, stresses likelihood
//!   ordering.
//!
//! With probability `noise_rate` a target receives one bounded perturbation
//! (a dropped token or an adjacent swap), creating plausible-but-imperfect
//! references. Group tokens are drawn without replacement, so noise-free
//! targets never contain consecutive repeats.
//!
//! Dataset files are line-delimited JSON: `{"id":0,"context":[..],"target":[..]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::derive_seed;
use crate::tokens::{TokenSeq, FIRST_TASK_ID};

/// Group separator token (salient_copy).
pub const SEP_ID: u32 = FIRST_TASK_ID;
/// Marker prefixed to the salient group (salient_copy).
pub const KEY_ID: u32 = FIRST_TASK_ID + 1;
/// First content token id.
pub const FIRST_CONTENT_ID: u32 = FIRST_TASK_ID + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SalientCopy,
    SortedUnique,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub task: TaskKind,
    pub vocab_size: u32,
    pub input_len_min: usize,
    pub input_len_max: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub seed: u64,
    /// Probability of perturbing a target (one token dropped or swapped).
    pub noise_rate: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            task: TaskKind::SalientCopy,
            vocab_size: 128,
            input_len_min: 12,
            input_len_max: 24,
            num_train: 20_000,
            num_val: 512,
            num_test: 512,
            seed: 1,
            noise_rate: 0.3,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < FIRST_CONTENT_ID + 8 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} leaves fewer than 8 content tokens",
                self.vocab_size
            )));
        }
        if self.num_train == 0 || self.num_val == 0 || self.num_test == 0 {
            return Err(Error::InvalidConfig("split sizes must be >= 1".into()));
        }
        if self.input_len_min < 4 || self.input_len_min > self.input_len_max {
            return Err(Error::InvalidConfig(format!(
                "bad input length range [{}, {}]",
                self.input_len_min, self.input_len_max
            )));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::InvalidConfig("noise_rate must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn content_range(&self) -> std::ops::Range<u32> {
        FIRST_CONTENT_ID..self.vocab_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub context: TokenSeq,
    pub target: TokenSeq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// Reference target of the sorted_unique task: distinct tokens ascending.
pub fn sorted_unique_target(input: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = input.to_vec();
    out.sort_unstable();
    out.dedup();
    out
}

/// Reference target of the salient_copy task: the group following KEY, up
/// to the next separator.
pub fn salient_copy_target(input: &[u32]) -> Option<Vec<u32>> {
    let start = input.iter().position(|&t| t == KEY_ID)? + 1;
    let group: Vec<u32> = input[start..]
        .iter()
        .take_while(|&&t| t != SEP_ID)
        .copied()
        .collect();
    if group.is_empty() {
        None
    } else {
        Some(group)
    }
}

/// Sample `count` distinct tokens from the content range.
fn sample_distinct(rng: &mut ChaCha8Rng, range: std::ops::Range<u32>, count: usize) -> Vec<u32> {
    let mut pool: Vec<u32> = range.collect();
    for i in 0..count {
        let j = i + rng.random_range(0..pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

fn apply_noise(target: &mut Vec<u32>, rng: &mut ChaCha8Rng) {
    if target.len() < 2 {
        return;
    }
    if rng.random::<bool>() {
        let i = rng.random_range(0..target.len());
        target.remove(i);
    } else {
        let i = rng.random_range(0..target.len() - 1);
        target.swap(i, i + 1);
    }
}

fn gen_salient_copy(
    spec: &SyntheticTaskSpec,
    rng: &mut ChaCha8Rng,
) -> (Vec<u32>, Vec<u32>) {
    let num_groups = rng.random_range(3..=4);
    let sizes: Vec<usize> = (0..num_groups).map(|_| rng.random_range(2..=5)).collect();
    let marked = rng.random_range(0..num_groups);
    let mut context = Vec::new();
    let mut target = Vec::new();
    for (g, &size) in sizes.iter().enumerate() {
        if g > 0 {
            context.push(SEP_ID);
        }
        if g == marked {
            context.push(KEY_ID);
        }
        let tokens = sample_distinct(rng, spec.content_range(), size);
        if g == marked {
            target = tokens.clone();
        }
        context.extend(tokens);
    }
    (context, target)
}

fn gen_sorted_unique(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> (Vec<u32>, Vec<u32>) {
    let len = rng.random_range(spec.input_len_min..=spec.input_len_max);
    let range = spec.content_range();
    let context: Vec<u32> = (0..len)
        .map(|_| rng.random_range(range.start..range.end))
        .collect();
    let target = sorted_unique_target(&context);
    (context, target)
}

fn gen_example(
    spec: &SyntheticTaskSpec,
    split_tag: u64,
    index: u64,
    max_target_len: usize,
) -> Example {
    // every example derives its own stream; a constraint violation redraws
    // from a follow-up stream, so generation stays a pure function of
    // (spec, seed)
    for attempt in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            spec.seed,
            &[split_tag, index, attempt],
        ));
        let (context, mut target) = match spec.task {
            TaskKind::SalientCopy => gen_salient_copy(spec, &mut rng),
            TaskKind::SortedUnique => gen_sorted_unique(spec, &mut rng),
        };
        if context.len() < spec.input_len_min || context.len() > spec.input_len_max {
            continue;
        }
        if rng.random::<f64>() < spec.noise_rate {
            apply_noise(&mut target, &mut rng);
        }
        // leave room for the EOS appended at training time
        if target.is_empty() || target.len() + 1 > max_target_len {
            continue;
        }
        return Example {
            id: index,
            context: TokenSeq::new(context),
            target: TokenSeq::new(target),
        };
    }
    unreachable!("bounded task constraints always admit some example");
}

/// Generate the three splits. `max_target_len` is the decoder length budget
/// (targets longer than it, EOS included, are regenerated).
pub fn generate_dataset(spec: &SyntheticTaskSpec, max_target_len: usize) -> Result<DatasetSplits> {
    spec.validate()?;
    if max_target_len < 3 {
        return Err(Error::InvalidConfig(
            "max_target_len must leave room for a token and EOS".into(),
        ));
    }
    let gen_split = |tag: u64, count: usize| -> Vec<Example> {
        (0..count)
            .map(|i| gen_example(spec, tag, i as u64, max_target_len))
            .collect()
    };
    Ok(DatasetSplits {
        train: gen_split(0, spec.num_train),
        val: gen_split(1, spec.num_val),
        test: gen_split(2, spec.num_test),
    })
}

pub fn write_split(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<Vec<Example>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// (context, target) view used by training and perplexity.
pub fn as_pairs(examples: &[Example]) -> Vec<(TokenSeq, TokenSeq)> {
    examples
        .iter()
        .map(|e| (e.context.clone(), e.target.clone()))
        .collect()
}

/// Sanity bound used when loading: all ids in range, targets non-empty.
pub fn validate_examples(examples: &[Example], vocab_size: u32) -> Result<()> {
    for ex in examples {
        TokenSeq::checked(ex.context.ids().to_vec(), vocab_size)?;
        TokenSeq::checked(ex.target.ids().to_vec(), vocab_size)?;
        if ex.target.is_empty() || ex.context.is_empty() {
            return Err(Error::InvalidTokenSeq(format!(
                "example {} has an empty side",
                ex.id
            )));
        }
    }
    Ok(())
}

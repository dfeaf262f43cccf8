//! Token sequences and reserved vocabulary ids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved token ids, fixed across the whole artifact.
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
/// First id available to task-level tokens (separators, keys, content).
pub const FIRST_TASK_ID: u32 = 3;

/// A finite sequence of token ids — the universal currency of contexts,
/// targets and decoded candidates.
///
/// Invariants (checked by [`TokenSeq::checked`]): all ids below the vocab
/// size, no interior PAD, at most one trailing EOS. Targets and contexts in
/// data files never contain BOS; decoded candidates may end in EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }

    /// Construct with invariant checks against a vocabulary size.
    pub fn checked(ids: Vec<u32>, vocab_size: u32) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: vocab_size,
            });
        }
        for (i, &id) in ids.iter().enumerate() {
            if id == PAD_ID {
                return Err(Error::InvalidTokenSeq(format!("PAD at position {i}")));
            }
            if id == EOS_ID && i + 1 != ids.len() {
                return Err(Error::InvalidTokenSeq(format!(
                    "EOS at interior position {i}"
                )));
            }
        }
        Ok(TokenSeq(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ends_with_eos(&self) -> bool {
        self.0.last() == Some(&EOS_ID)
    }

    /// Token ids without a trailing EOS — what metrics and similarity
    /// functions compare.
    pub fn content(&self) -> &[u32] {
        if self.ends_with_eos() {
            &self.0[..self.0.len() - 1]
        } else {
            &self.0
        }
    }

    /// Copy with a trailing EOS appended (no-op if already present).
    pub fn with_eos(&self) -> TokenSeq {
        if self.ends_with_eos() {
            self.clone()
        } else {
            let mut ids = self.0.clone();
            ids.push(EOS_ID);
            TokenSeq(ids)
        }
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }
}

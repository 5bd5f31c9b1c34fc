//! Denoiser backends: pluggable models producing one distribution per
//! masked generation position, standing in for the dLLM forward pass.
//!
//! Both shipped backends are deterministic and immutable after
//! construction, so a single model may serve many concurrent decode runs.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::engine::SequenceState;
use crate::prob::{Distribution, ProbError, TokenId};

mod ngram;
mod scripted;
mod vocab;

pub use ngram::NgramDenoiser;
pub use scripted::{ScriptRule, ScriptedOracle};
pub use vocab::{TokenizerMode, Vocab};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("corpus ingestion failed: {0}")]
    EmptyCorpus(String),
    #[error("unknown token: {0}")]
    UnknownToken(String),
    #[error("invalid model: {0}")]
    Model(String),
    #[error(transparent)]
    Prob(#[from] ProbError),
    #[error("model io failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("model parse failed: {0}")]
    Parse(#[from] serde_json::Error),
}

/// A denoiser predicts a [`Distribution`] for every currently masked
/// generation position in one call per decode step.
///
/// Contract: identical state and step produce identical output, every
/// returned distribution has the model's vocabulary size, and the map
/// covers exactly the masked generation positions.
pub trait Denoiser {
    fn vocab_size(&self) -> usize;

    fn predict(
        &self,
        state: &SequenceState,
        step: usize,
    ) -> Result<BTreeMap<usize, Distribution>, DenoiserError>;

    /// Content-derived identity string, recorded in traces so analyses
    /// can refuse to compare runs of different models.
    fn fingerprint(&self) -> String;
}

/// FNV-1a over a byte stream; cheap content hash for fingerprints.
pub(crate) fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub(crate) fn masked_positions(state: &SequenceState) -> Vec<usize> {
    state.masked_positions().collect()
}

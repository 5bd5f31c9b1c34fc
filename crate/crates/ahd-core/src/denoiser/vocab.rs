//! Token tables for the toy corpora: byte-level over UTF-8 by default,
//! or whitespace-separated words. The mask token id is one past the last
//! real token and never appears in prediction support.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::prob::TokenId;

use super::DenoiserError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    Bytes,
    Words,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vocab {
    Bytes { bytes: Vec<u8> },
    Words { words: Vec<String> },
}

impl Vocab {
    /// Builds the table from corpus lines; entries are sorted so ids are
    /// deterministic regardless of input order.
    pub fn from_corpus(lines: &[String], mode: TokenizerMode) -> Result<Self, DenoiserError> {
        match mode {
            TokenizerMode::Bytes => {
                let set: BTreeSet<u8> = lines.iter().flat_map(|l| l.bytes()).collect();
                if set.len() < 2 {
                    return Err(DenoiserError::EmptyCorpus(format!(
                        "need at least 2 distinct byte tokens, found {}",
                        set.len()
                    )));
                }
                Ok(Vocab::Bytes {
                    bytes: set.into_iter().collect(),
                })
            }
            TokenizerMode::Words => {
                let set: BTreeSet<String> = lines
                    .iter()
                    .flat_map(|l| l.split_whitespace())
                    .map(str::to_owned)
                    .collect();
                if set.len() < 2 {
                    return Err(DenoiserError::EmptyCorpus(format!(
                        "need at least 2 distinct word tokens, found {}",
                        set.len()
                    )));
                }
                Ok(Vocab::Words {
                    words: set.into_iter().collect(),
                })
            }
        }
    }

    /// Number of real tokens; distributions have this length.
    pub fn size(&self) -> usize {
        match self {
            Vocab::Bytes { bytes } => bytes.len(),
            Vocab::Words { words } => words.len(),
        }
    }

    /// The reserved mask id, one past the real tokens.
    pub fn mask_id(&self) -> TokenId {
        self.size()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, DenoiserError> {
        match self {
            Vocab::Bytes { bytes } => text
                .bytes()
                .map(|b| {
                    bytes
                        .binary_search(&b)
                        .map_err(|_| DenoiserError::UnknownToken(format!("byte 0x{b:02x}")))
                })
                .collect(),
            Vocab::Words { words } => text
                .split_whitespace()
                .map(|w| {
                    words
                        .binary_search(&w.to_owned())
                        .map_err(|_| DenoiserError::UnknownToken(format!("word {w:?}")))
                })
                .collect(),
        }
    }

    /// Renders token ids back to text; out-of-range ids (the mask) render
    /// as a replacement marker.
    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        match self {
            Vocab::Bytes { bytes } => {
                let raw: Vec<u8> = tokens
                    .iter()
                    .map(|&t| bytes.get(t).copied().unwrap_or(b'?'))
                    .collect();
                String::from_utf8_lossy(&raw).into_owned()
            }
            Vocab::Words { words } => tokens
                .iter()
                .map(|&t| words.get(t).map(String::as_str).unwrap_or("?"))
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

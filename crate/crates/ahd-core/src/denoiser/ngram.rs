//! Bidirectional n-gram denoiser: a desk-scale stand-in for the dLLM
//! forward pass. Each masked position is predicted from its longest
//! mask-free left context and longest mask-free right context (both
//! truncated at the first mask, never skipping over one), Laplace
//! smoothed, and blended.
//!
//! The mask token has zero count by construction and is excluded from
//! prediction support entirely.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::SequenceState;
use crate::prob::{Distribution, TokenId};

use super::{fnv1a, masked_positions, Denoiser, DenoiserError, TokenizerMode, Vocab};

pub const NGRAM_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct ContextCounts {
    total: u64,
    counts: BTreeMap<TokenId, u64>,
}

/// One table per context length 0..order−1, keyed by the context tokens
/// in natural (left-to-right) order.
type CtxTable = BTreeMap<Vec<TokenId>, ContextCounts>;

#[derive(Debug, Clone, PartialEq)]
pub struct NgramDenoiser {
    vocab: Vocab,
    order: usize,
    alpha: f64,
    mix: f64,
    left: Vec<CtxTable>,
    right: Vec<CtxTable>,
}

impl NgramDenoiser {
    /// Trains on pre-tokenized sequences. `order` n counts contexts of
    /// length 0..=n−1 in both directions.
    pub fn train(
        corpus: &[Vec<TokenId>],
        vocab: Vocab,
        order: usize,
        alpha: f64,
        mix: f64,
    ) -> Result<Self, DenoiserError> {
        if order < 1 {
            return Err(DenoiserError::Model("order must be >= 1".into()));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(DenoiserError::Model(format!("alpha must be > 0, got {alpha}")));
        }
        if !(0.0..=1.0).contains(&mix) {
            return Err(DenoiserError::Model(format!("mix must be in [0, 1], got {mix}")));
        }
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(DenoiserError::EmptyCorpus("no non-empty sequences".into()));
        }
        let v = vocab.size();
        for seq in corpus {
            if let Some(&bad) = seq.iter().find(|&&t| t >= v) {
                return Err(DenoiserError::UnknownToken(format!(
                    "token id {bad} out of range for vocab {v}"
                )));
            }
        }

        let mut left: Vec<CtxTable> = vec![CtxTable::new(); order];
        let mut right: Vec<CtxTable> = vec![CtxTable::new(); order];
        for seq in corpus {
            for i in 0..seq.len() {
                let target = seq[i];
                for len in 0..order {
                    if i >= len {
                        let ctx = seq[i - len..i].to_vec();
                        bump(&mut left[len], ctx, target);
                    }
                    if i + len < seq.len() {
                        let ctx = seq[i + 1..=i + len].to_vec();
                        bump(&mut right[len], ctx, target);
                    }
                }
            }
        }
        Ok(Self {
            vocab,
            order,
            alpha,
            mix,
            left,
            right,
        })
    }

    /// Convenience path: builds the vocabulary from the corpus lines
    /// (one document per line) and trains.
    pub fn from_text_lines(
        lines: &[String],
        mode: TokenizerMode,
        order: usize,
        alpha: f64,
        mix: f64,
    ) -> Result<Self, DenoiserError> {
        if lines.iter().all(|l| l.trim().is_empty()) {
            return Err(DenoiserError::EmptyCorpus("corpus has no content".into()));
        }
        let vocab = Vocab::from_corpus(lines, mode)?;
        let corpus: Vec<Vec<TokenId>> = lines
            .iter()
            .map(|l| vocab.tokenize(l))
            .collect::<Result<_, _>>()?;
        Self::train(&corpus, vocab, order, alpha, mix)
    }

    /// Reads a corpus file (plain UTF-8, one document per line) and trains.
    pub fn from_corpus_file(
        path: &Path,
        mode: TokenizerMode,
        order: usize,
        alpha: f64,
        mix: f64,
    ) -> Result<Self, DenoiserError> {
        let text = std::fs::read_to_string(path)?;
        let lines: Vec<String> = text.lines().map(str::to_owned).collect();
        Self::from_text_lines(&lines, mode, order, alpha, mix)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Laplace-smoothed conditional distribution for one direction.
    fn smoothed(&self, table: &[CtxTable], ctx: &[TokenId]) -> Distribution {
        let v = self.vocab.size();
        let empty = ContextCounts::default();
        let counts = table[ctx.len()].get(ctx).unwrap_or(&empty);
        let denom = counts.total as f64 + self.alpha * v as f64;
        let probs: Vec<f64> = (0..v)
            .map(|t| (counts.counts.get(&t).copied().unwrap_or(0) as f64 + self.alpha) / denom)
            .collect();
        Distribution::new(probs).expect("smoothed counts form a distribution")
    }

    /// Longest mask-free left context of `abs`, capped at order−1, in
    /// natural order.
    fn left_context(&self, tokens: &[TokenId], mask: TokenId, abs: usize) -> Vec<TokenId> {
        let lo = abs.saturating_sub(self.order - 1);
        let mut start = abs;
        while start > lo && tokens[start - 1] != mask {
            start -= 1;
        }
        tokens[start..abs].to_vec()
    }

    fn right_context(&self, tokens: &[TokenId], mask: TokenId, abs: usize) -> Vec<TokenId> {
        let hi = (abs + self.order).min(tokens.len());
        let mut end = abs + 1;
        while end < hi && tokens[end] != mask {
            end += 1;
        }
        tokens[abs + 1..end].to_vec()
    }

    /// Blended bidirectional prediction for one masked absolute index.
    fn predict_at(&self, tokens: &[TokenId], mask: TokenId, abs: usize) -> Distribution {
        let left = self.smoothed(&self.left, &self.left_context(tokens, mask, abs));
        if self.mix == 1.0 {
            return left;
        }
        let right = self.smoothed(&self.right, &self.right_context(tokens, mask, abs));
        if self.mix == 0.0 {
            return right;
        }
        let blended: Vec<f64> = left
            .as_slice()
            .iter()
            .zip(right.as_slice())
            .map(|(&l, &r)| self.mix * l + (1.0 - self.mix) * r)
            .collect();
        Distribution::from_weights(blended).expect("blend of distributions normalizes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&NgramDump::from(self)).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DenoiserError> {
        let dump: NgramDump = serde_json::from_str(text)?;
        dump.into_model()
    }

    pub fn save(&self, path: &Path) -> Result<(), DenoiserError> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path) -> Result<Self, DenoiserError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn bump(table: &mut CtxTable, ctx: Vec<TokenId>, target: TokenId) {
    let entry = table.entry(ctx).or_default();
    entry.total += 1;
    *entry.counts.entry(target).or_insert(0) += 1;
}

impl Denoiser for NgramDenoiser {
    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn predict(
        &self,
        state: &SequenceState,
        _step: usize,
    ) -> Result<BTreeMap<usize, Distribution>, DenoiserError> {
        let tokens = state.tokens();
        let mask = state.mask_token();
        let prompt_len = state.layout().prompt_len;
        Ok(masked_positions(state)
            .into_iter()
            .map(|pos| (pos, self.predict_at(tokens, mask, prompt_len + pos)))
            .collect())
    }

    fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for table in self.left.iter().chain(&self.right) {
            for (ctx, cc) in table {
                bytes.extend(ctx.iter().flat_map(|t| t.to_le_bytes()));
                bytes.extend(cc.total.to_le_bytes());
                for (&t, &n) in &cc.counts {
                    bytes.extend(t.to_le_bytes());
                    bytes.extend(n.to_le_bytes());
                }
            }
        }
        format!(
            "ngram(order={},vocab={},alpha={},mix={},hash={:016x})",
            self.order,
            self.vocab.size(),
            self.alpha,
            self.mix,
            fnv1a(bytes)
        )
    }
}

/// Serialization mirror: context tables flattened to sorted pair lists so
/// the dump is valid JSON (maps with non-string keys are not).
#[derive(Serialize, Deserialize)]
struct NgramDump {
    schema_version: u32,
    order: usize,
    alpha: f64,
    mix: f64,
    vocab: Vocab,
    left: Vec<Vec<(Vec<TokenId>, u64, Vec<(TokenId, u64)>)>>,
    right: Vec<Vec<(Vec<TokenId>, u64, Vec<(TokenId, u64)>)>>,
}

fn dump_tables(tables: &[CtxTable]) -> Vec<Vec<(Vec<TokenId>, u64, Vec<(TokenId, u64)>)>> {
    tables
        .iter()
        .map(|t| {
            t.iter()
                .map(|(ctx, cc)| {
                    (
                        ctx.clone(),
                        cc.total,
                        cc.counts.iter().map(|(&k, &v)| (k, v)).collect(),
                    )
                })
                .collect()
        })
        .collect()
}

fn load_tables(
    dump: Vec<Vec<(Vec<TokenId>, u64, Vec<(TokenId, u64)>)>>,
) -> Vec<CtxTable> {
    dump.into_iter()
        .map(|t| {
            t.into_iter()
                .map(|(ctx, total, counts)| {
                    (
                        ctx,
                        ContextCounts {
                            total,
                            counts: counts.into_iter().collect(),
                        },
                    )
                })
                .collect()
        })
        .collect()
}

impl From<&NgramDenoiser> for NgramDump {
    fn from(m: &NgramDenoiser) -> Self {
        Self {
            schema_version: NGRAM_SCHEMA_VERSION,
            order: m.order,
            alpha: m.alpha,
            mix: m.mix,
            vocab: m.vocab.clone(),
            left: dump_tables(&m.left),
            right: dump_tables(&m.right),
        }
    }
}

impl NgramDump {
    fn into_model(self) -> Result<NgramDenoiser, DenoiserError> {
        if self.schema_version != NGRAM_SCHEMA_VERSION {
            return Err(DenoiserError::Model(format!(
                "ngram schema version {} not supported (expected {NGRAM_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.left.len() != self.order || self.right.len() != self.order {
            return Err(DenoiserError::Model("ngram dump table count mismatch".into()));
        }
        Ok(NgramDenoiser {
            vocab: self.vocab,
            order: self.order,
            alpha: self.alpha,
            mix: self.mix,
            left: load_tables(self.left),
            right: load_tables(self.right),
        })
    }
}

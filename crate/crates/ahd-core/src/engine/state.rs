//! Mutable decode state: the token buffer, per-position mask flags over
//! the generation region, and the current block cursor.
//!
//! Prompt positions are never masked and never mutated. A generation
//! position's token is written exactly once, at its unmask event.

use crate::prob::TokenId;

use super::layout::BlockLayout;
use super::EngineError;

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceState {
    layout: BlockLayout,
    tokens: Vec<TokenId>,
    masked: Vec<bool>,
    current_block: usize,
    vocab_size: usize,
}

impl SequenceState {
    /// All-mask initial state. The mask token id is `vocab_size`, one past
    /// the last real token.
    pub fn new(
        layout: BlockLayout,
        prompt: &[TokenId],
        vocab_size: usize,
    ) -> Result<Self, EngineError> {
        if vocab_size < 2 {
            return Err(EngineError::Dimension(format!(
                "vocab size must be >= 2, got {vocab_size}"
            )));
        }
        if prompt.len() != layout.prompt_len {
            return Err(EngineError::Config(format!(
                "prompt length {} does not match layout prompt_len {}",
                prompt.len(),
                layout.prompt_len
            )));
        }
        if let Some(&bad) = prompt.iter().find(|&&t| t >= vocab_size) {
            return Err(EngineError::Dimension(format!(
                "prompt token {bad} out of range for vocab {vocab_size}"
            )));
        }
        let mut tokens = prompt.to_vec();
        tokens.extend(std::iter::repeat(vocab_size).take(layout.gen_len));
        Ok(Self {
            layout,
            tokens,
            masked: vec![true; layout.gen_len],
            current_block: 0,
            vocab_size,
        })
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn mask_token(&self) -> TokenId {
        self.vocab_size
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Full buffer, prompt followed by generation positions.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Generation region only.
    pub fn gen_tokens(&self) -> &[TokenId] {
        &self.tokens[self.layout.prompt_len..]
    }

    pub fn is_masked(&self, gen_pos: usize) -> bool {
        self.masked[gen_pos]
    }

    pub fn current_block(&self) -> usize {
        self.current_block
    }

    pub fn has_masked(&self) -> bool {
        self.masked.iter().any(|&m| m)
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.masked
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
    }

    pub fn masked_in_block(&self, block: usize) -> Vec<usize> {
        self.layout
            .block_positions(block)
            .filter(|&p| self.masked[p])
            .collect()
    }

    pub fn block_fully_unmasked(&self, block: usize) -> bool {
        self.layout.block_positions(block).all(|p| !self.masked[p])
    }

    /// Commits a token at a masked generation position. Rejects double
    /// writes: unmasked tokens are never overwritten.
    pub fn unmask(&mut self, gen_pos: usize, token: TokenId) -> Result<(), EngineError> {
        if gen_pos >= self.layout.gen_len {
            return Err(EngineError::Dimension(format!(
                "position {gen_pos} out of range for gen_len {}",
                self.layout.gen_len
            )));
        }
        if !self.masked[gen_pos] {
            return Err(EngineError::Invariant(format!(
                "position {gen_pos} unmasked twice"
            )));
        }
        if token >= self.vocab_size {
            return Err(EngineError::Dimension(format!(
                "token {token} out of range for vocab {}",
                self.vocab_size
            )));
        }
        self.tokens[self.layout.abs_index(gen_pos)] = token;
        self.masked[gen_pos] = false;
        Ok(())
    }

    /// Advances the current block cursor past every fully unmasked
    /// leading block. AHD may pre-fill whole future blocks, so the index
    /// can move by more than one.
    pub fn advance_block(&mut self) {
        while self.current_block < self.layout.num_blocks()
            && self.block_fully_unmasked(self.current_block)
        {
            self.current_block += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(l: usize, b: usize) -> SequenceState {
        SequenceState::new(BlockLayout::new(0, l, b).unwrap(), &[], 4).unwrap()
    }

    #[test]
    fn starts_all_masked() {
        let s = state(6, 2);
        assert!(s.has_masked());
        assert_eq!(s.masked_positions().count(), 6);
        assert_eq!(s.gen_tokens(), &[4, 4, 4, 4, 4, 4]);
        assert_eq!(s.current_block(), 0);
    }

    #[test]
    fn unmask_is_write_once() {
        let mut s = state(4, 2);
        s.unmask(1, 3).unwrap();
        assert_eq!(s.gen_tokens()[1], 3);
        assert!(matches!(s.unmask(1, 2), Err(EngineError::Invariant(_))));
        assert!(s.unmask(0, 9).is_err());
    }

    #[test]
    fn advance_skips_multiple_blocks() {
        let mut s = state(6, 2);
        for p in 0..4 {
            s.unmask(p, 0).unwrap();
        }
        s.advance_block();
        assert_eq!(s.current_block(), 2);
        s.unmask(4, 0).unwrap();
        s.advance_block();
        assert_eq!(s.current_block(), 2);
        s.unmask(5, 0).unwrap();
        s.advance_block();
        assert_eq!(s.current_block(), 3);
    }

    #[test]
    fn prompt_is_kept_and_validated() {
        let layout = BlockLayout::new(2, 2, 2).unwrap();
        let s = SequenceState::new(layout, &[1, 2], 4).unwrap();
        assert_eq!(s.tokens(), &[1, 2, 4, 4]);
        assert!(SequenceState::new(layout, &[1], 4).is_err());
        assert!(SequenceState::new(layout, &[1, 9], 4).is_err());
    }
}

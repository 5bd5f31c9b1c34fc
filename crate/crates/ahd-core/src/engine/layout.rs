//! Block layout over the generation region: `L` positions after the
//! prompt, partitioned into `ceil(L/B)` blocks decoded left to right.

use serde::{Deserialize, Serialize};

use super::EngineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub block_len: usize,
}

impl BlockLayout {
    pub fn new(prompt_len: usize, gen_len: usize, block_len: usize) -> Result<Self, EngineError> {
        if gen_len < 1 {
            return Err(EngineError::Config("gen_len must be >= 1".into()));
        }
        if block_len < 1 {
            return Err(EngineError::Config("block_len must be >= 1".into()));
        }
        Ok(Self {
            prompt_len,
            gen_len,
            block_len,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.gen_len.div_ceil(self.block_len)
    }

    /// Block index of a generation position.
    pub fn block_of(&self, gen_pos: usize) -> usize {
        gen_pos / self.block_len
    }

    /// Generation positions of block `b`; the last block may be short.
    pub fn block_positions(&self, b: usize) -> std::ops::Range<usize> {
        let start = b * self.block_len;
        start..((start + self.block_len).min(self.gen_len))
    }

    /// Absolute index into the full token buffer.
    pub fn abs_index(&self, gen_pos: usize) -> usize {
        self.prompt_len + gen_pos
    }

    pub fn total_len(&self) -> usize {
        self.prompt_len + self.gen_len
    }
}

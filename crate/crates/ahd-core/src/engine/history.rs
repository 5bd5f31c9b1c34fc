//! Per-position historical buffers: the ring of the last `H` predicted
//! distributions at each tracked future position. The newest entry is the
//! anchor.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use crate::prob::Distribution;

/// Ring of up to `H` consecutive-step distributions for one position.
#[derive(Debug, Clone)]
pub struct PositionHistory {
    entries: Vec<Distribution>,
    newest_step: Option<usize>,
    capacity: usize,
}

impl PositionHistory {
    fn new(capacity: usize) -> Self {
        Self {
            entries: Vec::with_capacity(capacity),
            newest_step: None,
            capacity,
        }
    }

    /// Appends this step's distribution. A gap in the step sequence
    /// resets the ring; the oldest entry is evicted beyond capacity.
    pub fn push(&mut self, step: usize, dist: Distribution) {
        match self.newest_step {
            Some(prev) if prev + 1 == step => {}
            Some(_) | None => self.entries.clear(),
        }
        self.entries.push(dist);
        if self.entries.len() > self.capacity {
            self.entries.remove(0);
        }
        self.newest_step = Some(step);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn newest_step(&self) -> Option<usize> {
        self.newest_step
    }

    /// The current anchor: the newest buffered distribution.
    pub fn anchor(&self) -> Option<&Distribution> {
        self.entries.last()
    }

    /// Entries older than the anchor, ordered oldest→newest.
    pub fn older(&self) -> &[Distribution] {
        &self.entries[..self.entries.len().saturating_sub(1)]
    }
}

/// Buffers for every tracked future position.
#[derive(Debug, Clone)]
pub struct HistoryBuffers {
    map: BTreeMap<usize, PositionHistory>,
    capacity: usize,
}

impl HistoryBuffers {
    pub fn new(capacity: usize) -> Self {
        Self {
            map: BTreeMap::new(),
            capacity,
        }
    }

    /// Appends this step's distributions for every position in the
    /// lookahead window. Positions that left the window are dropped;
    /// positions newly entering it start fresh rings.
    pub fn update(
        &mut self,
        step: usize,
        window: &BTreeSet<usize>,
        preds: &BTreeMap<usize, Distribution>,
    ) {
        self.map.retain(|pos, _| window.contains(pos));
        for &pos in window {
            if let Some(dist) = preds.get(&pos) {
                self.map
                    .entry(pos)
                    .or_insert_with(|| PositionHistory::new(self.capacity))
                    .push(step, dist.clone());
            }
        }
    }

    pub fn remove(&mut self, pos: usize) {
        self.map.remove(&pos);
    }

    pub fn get(&self, pos: usize) -> Option<&PositionHistory> {
        self.map.get(&pos)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &PositionHistory)> {
        self.map.iter().map(|(&p, h)| (p, h))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

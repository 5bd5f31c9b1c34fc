//! Stability analysis over a complete trace: first stable steps,
//! block-boundary delays, and cross-block stable token identification.
//!
//! A position's first stable step is the smallest `t` such that the
//! recorded argmax equals the final token at every step in
//! `[t, unmask step)`. The interval excludes the unmask step itself, so
//! `t = unmask step` always qualifies vacuously: a position that never
//! matched early gets delay 0 rather than a hole in the report.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{DecodeTrace, TraceError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PositionStability {
    pub pos: usize,
    pub unmask_step: usize,
    pub first_stable_step: Option<usize>,
    /// `unmask_step − first_stable_step`.
    pub delay: Option<usize>,
    /// True when the position stabilized before its block became current.
    pub cross_block: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub positions: Vec<PositionStability>,
    pub cross_block_count: usize,
    /// Mean boundary delay over cross-block stable positions.
    pub mean_delay: Option<f64>,
    pub max_delay: Option<usize>,
    /// First-stable-step histogram over cross-block stable positions.
    pub histogram: BTreeMap<usize, usize>,
}

/// Computes per-position stability from a complete trace. Errors when a
/// position lacks an argmax record at any step before its unmask step.
pub fn first_stable_steps(trace: &DecodeTrace) -> Result<StabilityReport, TraceError> {
    let l = trace.layout.gen_len;
    if trace.final_tokens.len() != l {
        return Err(TraceError::Incomplete(format!(
            "final tokens cover {} of {l} positions",
            trace.final_tokens.len()
        )));
    }
    let unmask_steps = trace.unmask_steps()?;

    // first step at which each block is the current block
    let mut block_current_step: BTreeMap<usize, usize> = BTreeMap::new();
    for rec in &trace.steps {
        block_current_step.entry(rec.current_block).or_insert(rec.step);
    }

    let mut positions = Vec::with_capacity(l);
    for pos in 0..l {
        let unmask = unmask_steps[pos];
        let final_token = trace.final_tokens[pos];
        let mut first = unmask;
        for s in (0..unmask).rev() {
            let rec = trace.steps[s].predictions.get(&pos).ok_or_else(|| {
                TraceError::Incomplete(format!(
                    "position {pos} has no argmax record at step {s}"
                ))
            })?;
            if rec.token == final_token {
                first = s;
            } else {
                break;
            }
        }
        let became_current = block_current_step
            .get(&trace.layout.block_of(pos))
            .copied()
            .unwrap_or(usize::MAX);
        positions.push(PositionStability {
            pos,
            unmask_step: unmask,
            first_stable_step: Some(first),
            delay: Some(unmask - first),
            cross_block: first < became_current,
        });
    }

    let cross: Vec<&PositionStability> = positions.iter().filter(|p| p.cross_block).collect();
    let delays: Vec<usize> = cross.iter().filter_map(|p| p.delay).collect();
    let mut histogram = BTreeMap::new();
    for p in &cross {
        if let Some(s) = p.first_stable_step {
            *histogram.entry(s).or_insert(0) += 1;
        }
    }
    Ok(StabilityReport {
        cross_block_count: cross.len(),
        mean_delay: if delays.is_empty() {
            None
        } else {
            Some(delays.iter().sum::<usize>() as f64 / delays.len() as f64)
        },
        max_delay: delays.iter().max().copied(),
        histogram,
        positions,
    })
}

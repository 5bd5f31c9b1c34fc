//! Per-step unmask selection: the vanilla top-k schedule, confidence-aware
//! parallel selection for the current block, and the anchored-consistency
//! rule for cross-block future unlocking.

use std::collections::BTreeMap;

use crate::prob::{anchored_consistency_score, kl_divergence, DecayWeights, Distribution};

use super::history::HistoryBuffers;
use super::state::SequenceState;
use super::{AcsValue, EngineError, FutureGating, StabilityMetric, StepDecision, UnmaskEvent, UnmaskReason};

fn by_confidence_desc(events: &mut [(usize, f64)]) {
    // ties break toward the lowest position index
    events.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Vanilla schedule: unmask the `k` highest-confidence masked positions
/// of the current block (fewer when fewer remain).
pub fn vanilla_select(
    preds: &BTreeMap<usize, Distribution>,
    state: &SequenceState,
    k: usize,
) -> StepDecision {
    let mut ranked: Vec<(usize, f64)> = state
        .masked_in_block(state.current_block())
        .into_iter()
        .filter_map(|p| preds.get(&p).map(|d| (p, d.confidence().prob)))
        .collect();
    by_confidence_desc(&mut ranked);
    ranked.truncate(k);
    ranked.sort_by_key(|&(p, _)| p);
    let current = ranked
        .into_iter()
        .map(|(pos, _)| {
            let c = preds[&pos].confidence();
            UnmaskEvent {
                pos,
                token: c.token,
                confidence: c.prob,
                reason: UnmaskReason::Schedule,
            }
        })
        .collect();
    StepDecision {
        current,
        future: Vec::new(),
        acs: BTreeMap::new(),
    }
}

/// Confidence-aware parallel selection: every current-block masked
/// position at or above the threshold; if none qualifies, the single
/// highest-confidence position unmasks so the step always progresses.
pub fn confidence_parallel_select(
    preds: &BTreeMap<usize, Distribution>,
    state: &SequenceState,
    threshold: f64,
) -> StepDecision {
    let candidates: Vec<(usize, f64)> = state
        .masked_in_block(state.current_block())
        .into_iter()
        .filter_map(|p| preds.get(&p).map(|d| (p, d.confidence().prob)))
        .collect();
    let mut chosen: Vec<usize> = candidates
        .iter()
        .filter(|&&(_, c)| c >= threshold)
        .map(|&(p, _)| p)
        .collect();
    if chosen.is_empty() && !candidates.is_empty() {
        let mut ranked = candidates;
        by_confidence_desc(&mut ranked);
        chosen.push(ranked[0].0);
    }
    let current = chosen
        .into_iter()
        .map(|pos| {
            let c = preds[&pos].confidence();
            UnmaskEvent {
                pos,
                token: c.token,
                confidence: c.prob,
                reason: UnmaskReason::Confidence,
            }
        })
        .collect();
    StepDecision {
        current,
        future: Vec::new(),
        acs: BTreeMap::new(),
    }
}

/// Cross-block unlock rule. Only positions with a full buffer of exactly
/// `H` consecutive entries are eligible; the newest entry is the anchor.
/// A position unlocks when its stability score is strictly below ε and,
/// under `AcsAndConfidence`, its anchor confidence reaches the threshold.
/// Returns the unlock events plus the score of every eligible position.
pub fn ahd_select_future(
    buffers: &HistoryBuffers,
    weights: &DecayWeights,
    epsilon: f64,
    gating: FutureGating,
    threshold: f64,
    metric: StabilityMetric,
) -> Result<(Vec<UnmaskEvent>, BTreeMap<usize, AcsValue>), EngineError> {
    let mut events = Vec::new();
    let mut scores = BTreeMap::new();
    for (pos, hist) in buffers.iter() {
        if !hist.is_full() {
            continue;
        }
        let anchor = hist.anchor().expect("full buffer has an anchor");
        let score = match metric {
            StabilityMetric::Acs => anchored_consistency_score(anchor, hist.older(), weights)?,
            StabilityMetric::OneStepKl => {
                let prev = hist
                    .older()
                    .last()
                    .expect("full buffer with H >= 2 has a previous entry");
                kl_divergence(anchor, prev)?
            }
        };
        scores.insert(pos, AcsValue::from(score));
        let confidence = anchor.confidence();
        let confident = match gating {
            FutureGating::AcsOnly => true,
            FutureGating::AcsAndConfidence => confidence.prob >= threshold,
        };
        if score < epsilon && confident {
            events.push(UnmaskEvent {
                pos,
                token: confidence.token,
                confidence: confidence.prob,
                reason: UnmaskReason::AhdCrossBlock,
            });
        }
    }
    Ok((events, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::layout::BlockLayout;
    use std::collections::BTreeSet;

    fn dist(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    fn state(l: usize, b: usize) -> SequenceState {
        SequenceState::new(BlockLayout::new(0, l, b).unwrap(), &[], 2).unwrap()
    }

    fn preds(pairs: &[(usize, &[f64])]) -> BTreeMap<usize, Distribution> {
        pairs.iter().map(|&(p, v)| (p, dist(v))).collect()
    }

    #[test]
    fn vanilla_takes_top_k_with_low_index_ties() {
        let s = state(4, 4);
        let p = preds(&[
            (0, &[0.9, 0.1]),
            (1, &[0.5, 0.5]),
            (2, &[0.9, 0.1]),
            (3, &[0.6, 0.4]),
        ]);
        let d = vanilla_select(&p, &s, 1);
        assert_eq!(d.current.len(), 1);
        assert_eq!(d.current[0].pos, 0);
        assert_eq!(d.current[0].reason, UnmaskReason::Schedule);
        let d = vanilla_select(&p, &s, 10);
        assert_eq!(d.current.len(), 4);
        assert!(d.future.is_empty());
    }

    #[test]
    fn vanilla_equal_confidence_prefers_lowest_index() {
        let s = state(3, 3);
        let p = preds(&[(0, &[0.7, 0.3]), (1, &[0.7, 0.3]), (2, &[0.7, 0.3])]);
        let d = vanilla_select(&p, &s, 2);
        let chosen: Vec<usize> = d.current.iter().map(|e| e.pos).collect();
        assert_eq!(chosen, vec![0, 1]);
    }

    #[test]
    fn parallel_threshold_and_fallback() {
        let s = state(3, 3);
        let p = preds(&[(0, &[0.95, 0.05]), (1, &[0.92, 0.08]), (2, &[0.4, 0.6])]);
        let d = confidence_parallel_select(&p, &s, 0.9);
        let chosen: Vec<usize> = d.current.iter().map(|e| e.pos).collect();
        assert_eq!(chosen, vec![0, 1]);

        let p = preds(&[(0, &[0.6, 0.4]), (1, &[0.7, 0.3]), (2, &[0.5, 0.5])]);
        let d = confidence_parallel_select(&p, &s, 0.9);
        let chosen: Vec<usize> = d.current.iter().map(|e| e.pos).collect();
        assert_eq!(chosen, vec![1]);
        assert_eq!(d.current[0].reason, UnmaskReason::Confidence);
    }

    #[test]
    fn parallel_boundary_threshold_is_inclusive() {
        let s = state(2, 2);
        let p = preds(&[(0, &[1.0, 0.0]), (1, &[0.4, 0.6])]);
        let d = confidence_parallel_select(&p, &s, 1.0);
        assert_eq!(d.current.len(), 1);
        assert_eq!(d.current[0].pos, 0);
    }

    fn full_buffers(entries: &[&[f64]], capacity: usize, positions: &[usize]) -> HistoryBuffers {
        let mut b = HistoryBuffers::new(capacity);
        let window: BTreeSet<usize> = positions.iter().copied().collect();
        for (step, v) in entries.iter().enumerate() {
            let p: BTreeMap<usize, Distribution> =
                positions.iter().map(|&pos| (pos, dist(v))).collect();
            b.update(step, &window, &p);
        }
        b
    }

    #[test]
    fn constant_buffer_unlocks_and_partial_never_does() {
        let w = DecayWeights::new(0.5, 3).unwrap();
        let b = full_buffers(&[&[0.9, 0.1], &[0.9, 0.1], &[0.9, 0.1]], 3, &[7]);
        let (events, scores) =
            ahd_select_future(&b, &w, 0.01, FutureGating::AcsOnly, 0.9, StabilityMetric::Acs)
                .unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].pos, 7);
        assert_eq!(events[0].reason, UnmaskReason::AhdCrossBlock);
        assert_eq!(scores[&7], AcsValue::from(0.0));

        let b = full_buffers(&[&[0.9, 0.1], &[0.9, 0.1]], 3, &[7]);
        let (events, scores) =
            ahd_select_future(&b, &w, 0.01, FutureGating::AcsOnly, 0.9, StabilityMetric::Acs)
                .unwrap();
        assert!(events.is_empty());
        assert!(scores.is_empty());
    }

    #[test]
    fn epsilon_zero_never_unlocks() {
        let w = DecayWeights::new(0.5, 3).unwrap();
        let b = full_buffers(&[&[0.9, 0.1], &[0.9, 0.1], &[0.9, 0.1]], 3, &[7]);
        let (events, _) =
            ahd_select_future(&b, &w, 0.0, FutureGating::AcsOnly, 0.9, StabilityMetric::Acs)
                .unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn confidence_gate_blocks_unconfident_anchor() {
        let w = DecayWeights::new(0.5, 3).unwrap();
        let b = full_buffers(&[&[0.6, 0.4], &[0.6, 0.4], &[0.6, 0.4]], 3, &[7]);
        let (events, _) = ahd_select_future(
            &b,
            &w,
            0.01,
            FutureGating::AcsAndConfidence,
            0.9,
            StabilityMetric::Acs,
        )
        .unwrap();
        assert!(events.is_empty());
        let (events, _) =
            ahd_select_future(&b, &w, 0.01, FutureGating::AcsOnly, 0.9, StabilityMetric::Acs)
                .unwrap();
        assert_eq!(events.len(), 1);
    }

    #[test]
    fn oscillating_buffer_rejected_by_acs_but_not_one_step() {
        // hold-2 square wave, observed at the second step of a hold
        let w = DecayWeights::new(std::f64::consts::LN_2, 3).unwrap();
        let b = full_buffers(&[&[0.1, 0.9], &[0.9, 0.1], &[0.9, 0.1]], 3, &[7]);
        let (events, scores) =
            ahd_select_future(&b, &w, 0.01, FutureGating::AcsOnly, 0.9, StabilityMetric::Acs)
                .unwrap();
        assert!(events.is_empty());
        match scores[&7] {
            AcsValue::Finite(v) => {
                let expected = (1.0 / 3.0) * 0.8 * 9.0f64.ln();
                assert!((v - expected).abs() < 1e-9, "got {v}");
            }
            AcsValue::Infinite => panic!("score should be finite"),
        }
        let (events, scores) = ahd_select_future(
            &b,
            &w,
            0.01,
            FutureGating::AcsOnly,
            0.9,
            StabilityMetric::OneStepKl,
        )
        .unwrap();
        assert_eq!(scores[&7], AcsValue::from(0.0));
        assert_eq!(events.len(), 1);
    }
}

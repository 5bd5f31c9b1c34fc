//! The semi-autoregressive decoding loop.
//!
//! One run is strictly single-threaded: the model is invoked once per
//! step on the full state, the current block is decoded by schedule or
//! confidence threshold, and (under AHD) future positions with stable
//! prediction trajectories are unlocked across block boundaries.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::denoiser::{Denoiser, DenoiserError};
use crate::prob::{DecayWeights, Distribution, ProbError, TokenId};
use crate::trace::{DecodeTrace, Prediction, StepRecord, TraceOptions};

mod config;
mod history;
mod layout;
mod select;
mod state;

pub use config::{FutureGating, Lookahead, StabilityMetric, Strategy, StrategyConfig};
pub use history::{HistoryBuffers, PositionHistory};
pub use layout::BlockLayout;
pub use select::{ahd_select_future, confidence_parallel_select, vanilla_select};
pub use state::SequenceState;

/// Largest vocabulary for which full distributions may be dumped into a
/// trace.
pub const DUMP_DISTS_MAX_VOCAB: usize = 512;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing prediction for masked position {0} and no stale value to flush")]
    MissingPrediction(usize),
    #[error("internal invariant failed: {0}")]
    Invariant(String),
    #[error(transparent)]
    Prob(#[from] ProbError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

/// Why a position was unmasked at its event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmaskReason {
    Schedule,
    Confidence,
    AhdCrossBlock,
    FinalFlush,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnmaskEvent {
    pub pos: usize,
    pub token: TokenId,
    pub confidence: f64,
    pub reason: UnmaskReason,
}

/// A stability score that may be infinite (KL support mismatch). JSON has
/// no infinity, so the infinite case serializes as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AcsValue {
    Finite(f64),
    Infinite,
}

impl From<f64> for AcsValue {
    fn from(v: f64) -> Self {
        if v.is_infinite() {
            AcsValue::Infinite
        } else {
            AcsValue::Finite(v)
        }
    }
}

impl AcsValue {
    pub fn as_f64(&self) -> f64 {
        match self {
            AcsValue::Finite(v) => *v,
            AcsValue::Infinite => f64::INFINITY,
        }
    }
}

impl Serialize for AcsValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            AcsValue::Finite(v) => s.serialize_f64(*v),
            AcsValue::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for AcsValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = AcsValue;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number or the string \"inf\"")
            }
            fn visit_f64<E: serde::de::Error>(self, v: f64) -> Result<AcsValue, E> {
                Ok(AcsValue::Finite(v))
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<AcsValue, E> {
                Ok(AcsValue::Finite(v as f64))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<AcsValue, E> {
                Ok(AcsValue::Finite(v as f64))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<AcsValue, E> {
                if v == "inf" {
                    Ok(AcsValue::Infinite)
                } else {
                    Err(E::custom(format!("unexpected score string {v:?}")))
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// One step's unmask decision: the current-block set `G_c`, the future
/// set `G_f`, and the stability score of every eligible future position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDecision {
    pub current: Vec<UnmaskEvent>,
    pub future: Vec<UnmaskEvent>,
    pub acs: BTreeMap<usize, AcsValue>,
}

impl StepDecision {
    /// All events of the step in ascending position order.
    pub fn events_sorted(&self) -> Vec<UnmaskEvent> {
        let mut all: Vec<UnmaskEvent> =
            self.current.iter().chain(&self.future).cloned().collect();
        all.sort_by_key(|e| e.pos);
        all
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty() && self.future.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    /// Generation-region tokens, fully unmasked.
    pub tokens: Vec<TokenId>,
    pub trace: DecodeTrace,
}

/// Masked positions in blocks after the current one, clipped to the
/// lookahead window.
fn future_window(state: &SequenceState, lookahead: Lookahead) -> BTreeSet<usize> {
    let current = state.current_block();
    let last = match lookahead {
        Lookahead::All => usize::MAX,
        Lookahead::Blocks(k) => current.saturating_add(k),
    };
    state
        .masked_positions()
        .filter(|&p| {
            let b = state.layout().block_of(p);
            b > current && b <= last
        })
        .collect()
}

fn sample_token(dist: &Distribution, rng: &mut ChaCha8Rng) -> TokenId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (t, &p) in dist.as_slice().iter().enumerate() {
        acc += p;
        if u < acc {
            return t;
        }
    }
    dist.len() - 1
}

/// Runs one decode to completion and returns the final tokens plus the
/// full per-step trace. The number of model invocations equals the trace
/// step count.
pub fn run_decode(
    model: &dyn Denoiser,
    layout: BlockLayout,
    prompt: &[TokenId],
    config: &StrategyConfig,
    opts: &TraceOptions,
) -> Result<DecodeOutcome, EngineError> {
    config.validate()?;
    let vocab = model.vocab_size();
    if vocab < 2 {
        return Err(EngineError::Dimension(format!(
            "model vocab size must be >= 2, got {vocab}"
        )));
    }
    let mut state = SequenceState::new(layout, prompt, vocab)?;
    let weights = match config.strategy {
        Strategy::Ahd => Some(DecayWeights::new(config.lambda, config.horizon)?),
        _ => None,
    };
    let mut buffers = HistoryBuffers::new(config.horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = DecodeTrace::new(config.clone(), layout, model.fingerprint());
    let dump_dists = opts.dump_dists && vocab <= DUMP_DISTS_MAX_VOCAB;
    let mut last_argmax: BTreeMap<usize, Prediction> = BTreeMap::new();
    let mut step = 0usize;

    while state.has_masked() {
        if step > layout.gen_len {
            return Err(EngineError::Invariant(format!(
                "step {step} exceeded generation length {}; progress guarantee violated",
                layout.gen_len
            )));
        }
        let raw = model.predict(&state, step)?;

        // Validate coverage and dimensions; apply the optional floor.
        let mut preds: BTreeMap<usize, Distribution> = BTreeMap::new();
        for (pos, dist) in raw {
            if pos >= layout.gen_len {
                return Err(EngineError::Dimension(format!(
                    "model predicted out-of-range position {pos}"
                )));
            }
            if !state.is_masked(pos) {
                continue;
            }
            if dist.len() != vocab {
                return Err(EngineError::Dimension(format!(
                    "model distribution at position {pos} has length {}, vocab is {vocab}",
                    dist.len()
                )));
            }
            let dist = if config.prob_floor > 0.0 {
                dist.with_floor(config.prob_floor)?
            } else {
                dist
            };
            preds.insert(pos, dist);
        }

        let predictions: BTreeMap<usize, Prediction> = preds
            .iter()
            .map(|(&pos, d)| {
                let c = d.confidence();
                (pos, Prediction { token: c.token, confidence: c.prob })
            })
            .collect();
        last_argmax.extend(predictions.clone());

        let missing: Vec<usize> = state
            .masked_positions()
            .filter(|p| !preds.contains_key(p))
            .collect();
        if !missing.is_empty() {
            // The model broke its coverage contract: flush everything
            // left at its last-seen argmax so the engine stays total.
            let mut events = Vec::new();
            for pos in state.masked_positions().collect::<Vec<_>>() {
                let p = last_argmax
                    .get(&pos)
                    .ok_or(EngineError::MissingPrediction(pos))?
                    .clone();
                events.push(UnmaskEvent {
                    pos,
                    token: p.token,
                    confidence: p.confidence,
                    reason: UnmaskReason::FinalFlush,
                });
            }
            let current_block = state.current_block();
            for ev in &events {
                state.unmask(ev.pos, ev.token)?;
            }
            trace.push_step(StepRecord {
                step,
                current_block,
                predictions,
                acs: BTreeMap::new(),
                events,
                distributions: None,
            });
            state.advance_block();
            break;
        }

        // Future tracking and cross-block selection.
        let mut decision = match config.strategy {
            Strategy::Vanilla => vanilla_select(&preds, &state, config.tokens_per_step),
            Strategy::ConfidenceParallel => {
                confidence_parallel_select(&preds, &state, config.confidence_threshold)
            }
            Strategy::Ahd => {
                let window = future_window(&state, config.lookahead);
                buffers.update(step, &window, &preds);
                let (future, acs) = ahd_select_future(
                    &buffers,
                    weights.as_ref().expect("AHD has weights"),
                    config.epsilon,
                    config.gating,
                    config.confidence_threshold,
                    config.stability_metric,
                )?;
                let mut d =
                    confidence_parallel_select(&preds, &state, config.confidence_threshold);
                d.future = future;
                d.acs = acs;
                d
            }
        };
        if decision.is_empty() {
            return Err(EngineError::Invariant(format!(
                "step {step} selected no positions while {} remain masked",
                state.masked_positions().count()
            )));
        }

        // Commit in ascending position order; with temperature the token
        // is sampled, but the recorded confidence stays the pre-sampling
        // max probability.
        let mut events = decision.events_sorted();
        for ev in &mut events {
            if config.temperature > 0.0 {
                let shaped = preds[&ev.pos].apply_temperature(config.temperature)?;
                ev.token = sample_token(&shaped, &mut rng);
            }
            state.unmask(ev.pos, ev.token)?;
            buffers.remove(ev.pos);
        }

        trace.push_step(StepRecord {
            step,
            current_block: state.current_block(),
            predictions,
            acs: std::mem::take(&mut decision.acs),
            events,
            distributions: dump_dists.then(|| {
                preds
                    .iter()
                    .map(|(&pos, d)| (pos, d.as_slice().to_vec()))
                    .collect()
            }),
        });

        state.advance_block();
        step += 1;
    }

    let tokens = state.gen_tokens().to_vec();
    trace.finalize(tokens.clone());
    Ok(DecodeOutcome { tokens, trace })
}

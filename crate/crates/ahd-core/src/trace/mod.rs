//! Decode traces: the complete per-step record of a run, its JSON-lines
//! file format, replay, and trace-to-trace comparison.
//!
//! File layout: one header line carrying the config snapshot, one line
//! per step, and a final line with the committed tokens. Every line is a
//! JSON object with a `kind` field; the header carries `schema_version`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{AcsValue, BlockLayout, StrategyConfig, UnmaskEvent};
use crate::prob::TokenId;

mod stability;

pub use stability::{first_stable_steps, PositionStability, StabilityReport};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("incomplete trace: {0}")]
    Incomplete(String),
    #[error("traces are not comparable: {0}")]
    LayoutMismatch(String),
    #[error("trace schema version {found} not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("trace io failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace parse failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Options controlling what a run records beyond the mandatory fields.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceOptions {
    /// Dump full distributions per step (only honored for vocabularies of
    /// at most [`crate::engine::DUMP_DISTS_MAX_VOCAB`] tokens).
    pub dump_dists: bool,
}

/// Greedy prediction snapshot for one masked position at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub token: TokenId,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub current_block: usize,
    /// Argmax and confidence for every position that was masked when the
    /// model ran, lookahead positions included.
    pub predictions: BTreeMap<usize, Prediction>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub acs: BTreeMap<usize, AcsValue>,
    pub events: Vec<UnmaskEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distributions: Option<BTreeMap<usize, Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub schema_version: u32,
    pub config: StrategyConfig,
    pub layout: BlockLayout,
    pub model: String,
    pub steps: Vec<StepRecord>,
    pub final_tokens: Vec<TokenId>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Header {
        schema_version: u32,
        config: StrategyConfig,
        layout: BlockLayout,
        model: String,
    },
    Step(StepRecord),
    Final { tokens: Vec<TokenId> },
}

impl DecodeTrace {
    pub fn new(config: StrategyConfig, layout: BlockLayout, model: String) -> Self {
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            config,
            layout,
            model,
            steps: Vec::new(),
            final_tokens: Vec::new(),
        }
    }

    pub fn push_step(&mut self, record: StepRecord) {
        self.steps.push(record);
    }

    pub fn finalize(&mut self, tokens: Vec<TokenId>) {
        self.final_tokens = tokens;
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    /// Unmask step of each generation position; errors unless the events
    /// across all steps partition the positions exactly.
    pub fn unmask_steps(&self) -> Result<Vec<usize>, TraceError> {
        let l = self.layout.gen_len;
        let mut steps = vec![None; l];
        for rec in &self.steps {
            for ev in &rec.events {
                if ev.pos >= l {
                    return Err(TraceError::Incomplete(format!(
                        "event position {} out of range",
                        ev.pos
                    )));
                }
                if steps[ev.pos].replace(rec.step).is_some() {
                    return Err(TraceError::Incomplete(format!(
                        "position {} has more than one unmask event",
                        ev.pos
                    )));
                }
            }
        }
        steps
            .into_iter()
            .enumerate()
            .map(|(pos, s)| {
                s.ok_or_else(|| {
                    TraceError::Incomplete(format!("position {pos} has no unmask event"))
                })
            })
            .collect()
    }

    /// Replays the unmask events in step order against an all-mask
    /// buffer; the result must reproduce the final tokens bit-exactly.
    pub fn replay_tokens(&self) -> Result<Vec<TokenId>, TraceError> {
        let l = self.layout.gen_len;
        let mut tokens = vec![None; l];
        for rec in &self.steps {
            for ev in &rec.events {
                if ev.pos >= l || tokens[ev.pos].replace(ev.token).is_some() {
                    return Err(TraceError::Incomplete(format!(
                        "bad replay event at position {}",
                        ev.pos
                    )));
                }
            }
        }
        tokens
            .into_iter()
            .enumerate()
            .map(|(pos, t)| {
                t.ok_or_else(|| TraceError::Incomplete(format!("position {pos} never unmasked")))
            })
            .collect()
    }

    /// Canonical serialization of the run's behavior: layout, per-step
    /// unmask events, and final tokens. Strategy-specific diagnostics
    /// (config snapshot, ACS values, prediction records) are excluded, so
    /// two strategies that decode identically serialize identically.
    pub fn behavior_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Step<'a> {
            step: usize,
            current_block: usize,
            events: &'a [UnmaskEvent],
        }
        #[derive(Serialize)]
        struct Behavior<'a> {
            layout: &'a BlockLayout,
            steps: Vec<Step<'a>>,
            final_tokens: &'a [TokenId],
        }
        serde_json::to_vec(&Behavior {
            layout: &self.layout,
            steps: self
                .steps
                .iter()
                .map(|r| Step {
                    step: r.step,
                    current_block: r.current_block,
                    events: &r.events,
                })
                .collect(),
            final_tokens: &self.final_tokens,
        })
        .expect("behavior serializes")
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        let header = TraceLine::Header {
            schema_version: self.schema_version,
            config: self.config.clone(),
            layout: self.layout,
            model: self.model.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for rec in &self.steps {
            serde_json::to_writer(&mut w, &TraceLine::Step(rec.clone()))?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut w, &TraceLine::Final { tokens: self.final_tokens.clone() })?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut trace: Option<DecodeTrace> = None;
        let mut saw_final = false;
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<TraceLine>(&line)? {
                TraceLine::Header {
                    schema_version,
                    config,
                    layout,
                    model,
                } => {
                    if schema_version != TRACE_SCHEMA_VERSION {
                        return Err(TraceError::SchemaVersion {
                            found: schema_version,
                            expected: TRACE_SCHEMA_VERSION,
                        });
                    }
                    if trace.is_some() {
                        return Err(TraceError::Incomplete("duplicate header line".into()));
                    }
                    trace = Some(DecodeTrace::new(config, layout, model));
                }
                TraceLine::Step(rec) => {
                    let t = trace
                        .as_mut()
                        .ok_or_else(|| TraceError::Incomplete("missing header line".into()))?;
                    if rec.step != t.steps.len() {
                        return Err(TraceError::Incomplete(format!(
                            "step records out of order at step {}",
                            rec.step
                        )));
                    }
                    t.push_step(rec);
                }
                TraceLine::Final { tokens } => {
                    let t = trace
                        .as_mut()
                        .ok_or_else(|| TraceError::Incomplete("missing header line".into()))?;
                    t.finalize(tokens);
                    saw_final = true;
                }
            }
        }
        let trace = trace.ok_or_else(|| TraceError::Incomplete("empty trace file".into()))?;
        if !saw_final {
            return Err(TraceError::Incomplete("missing final line".into()));
        }
        Ok(trace)
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}

/// Step counts, token agreement, and the first step at which two runs
/// diverge.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceDiff {
    pub steps_a: usize,
    pub steps_b: usize,
    pub agreement: f64,
    pub first_divergent_step: Option<usize>,
}

impl TraceDiff {
    pub fn identical(&self) -> bool {
        self.steps_a == self.steps_b
            && self.first_divergent_step.is_none()
            && (self.agreement - 1.0).abs() < f64::EPSILON
    }
}

/// Compares two runs over the same layout and model. The layouts and
/// model fingerprints must match; everything else is reported, not
/// asserted.
pub fn compare_traces(a: &DecodeTrace, b: &DecodeTrace) -> Result<TraceDiff, TraceError> {
    if a.layout != b.layout {
        return Err(TraceError::LayoutMismatch(format!(
            "layouts differ: {:?} vs {:?}",
            a.layout, b.layout
        )));
    }
    if a.model != b.model {
        return Err(TraceError::LayoutMismatch(format!(
            "model fingerprints differ: {} vs {}",
            a.model, b.model
        )));
    }
    let l = a.layout.gen_len;
    let agreed = a
        .final_tokens
        .iter()
        .zip(&b.final_tokens)
        .filter(|(x, y)| x == y)
        .count();
    let mut first_divergent_step = None;
    for i in 0..a.steps.len().max(b.steps.len()) {
        match (a.steps.get(i), b.steps.get(i)) {
            (Some(ra), Some(rb)) if ra.events == rb.events => {}
            _ => {
                first_divergent_step = Some(i);
                break;
            }
        }
    }
    Ok(TraceDiff {
        steps_a: a.steps.len(),
        steps_b: b.steps.len(),
        agreement: agreed as f64 / l as f64,
        first_divergent_step,
    })
}

/// Writes the steps × positions argmax matrix as CSV (header row, LF
/// endings) plus a companion marker file of
/// `position,first_stable_step,unmask_step`. Returns the marker path.
pub fn export_heatmap(trace: &DecodeTrace, path: &Path) -> Result<std::path::PathBuf, TraceError> {
    let l = trace.layout.gen_len;
    let report = first_stable_steps(trace)?;
    let mut out = String::new();
    let header: Vec<String> = (0..l).map(|j| format!("p{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for rec in &trace.steps {
        let row: Vec<String> = (0..l)
            .map(|j| {
                rec.predictions
                    .get(&j)
                    .map(|p| p.token)
                    .unwrap_or(trace.final_tokens[j])
                    .to_string()
            })
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;

    let marker_path = path.with_extension("markers.csv");
    let mut out = String::from("position,first_stable_step,unmask_step\n");
    for p in &report.positions {
        let stable = p
            .first_stable_step
            .map(|s| s.to_string())
            .unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", p.pos, stable, p.unmask_step));
    }
    std::fs::write(&marker_path, out)?;
    Ok(marker_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Strategy, UnmaskReason};

    pub(crate) fn synthetic_trace(
        gen_len: usize,
        block_len: usize,
        rows: &[(usize, usize, Vec<(usize, TokenId, f64)>, Vec<(usize, TokenId)>)],
        final_tokens: Vec<TokenId>,
    ) -> DecodeTrace {
        // rows: (step, current_block, predictions(pos, token, conf), events(pos, token))
        let layout = BlockLayout::new(0, gen_len, block_len).unwrap();
        let mut t = DecodeTrace::new(
            StrategyConfig { strategy: Strategy::Vanilla, ..Default::default() },
            layout,
            "synthetic".into(),
        );
        for (step, current_block, preds, events) in rows {
            t.push_step(StepRecord {
                step: *step,
                current_block: *current_block,
                predictions: preds
                    .iter()
                    .map(|&(p, tok, c)| (p, Prediction { token: tok, confidence: c }))
                    .collect(),
                acs: BTreeMap::new(),
                events: events
                    .iter()
                    .map(|&(pos, token)| UnmaskEvent {
                        pos,
                        token,
                        confidence: 1.0,
                        reason: UnmaskReason::Schedule,
                    })
                    .collect(),
                distributions: None,
            });
        }
        t.finalize(final_tokens);
        t
    }

    #[test]
    fn jsonl_round_trip() {
        let t = synthetic_trace(
            2,
            2,
            &[
                (0, 0, vec![(0, 1, 0.8), (1, 0, 0.6)], vec![(0, 1)]),
                (1, 0, vec![(1, 0, 0.9)], vec![(1, 0)]),
            ],
            vec![1, 0],
        );
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let restored = DecodeTrace::read_jsonl(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(restored, t);
    }

    #[test]
    fn schema_version_is_enforced() {
        let t = synthetic_trace(2, 2, &[(0, 0, vec![], vec![(0, 0), (1, 0)])], vec![0, 0]);
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace(
            "\"schema_version\":1",
            "\"schema_version\":77",
        );
        let err = DecodeTrace::read_jsonl(std::io::Cursor::new(text.into_bytes())).unwrap_err();
        assert!(matches!(err, TraceError::SchemaVersion { found: 77, .. }));
    }

    #[test]
    fn replay_reconstructs_final_tokens() {
        let t = synthetic_trace(
            3,
            3,
            &[
                (0, 0, vec![], vec![(2, 5)]),
                (1, 0, vec![], vec![(0, 3), (1, 4)]),
            ],
            vec![3, 4, 5],
        );
        assert_eq!(t.replay_tokens().unwrap(), t.final_tokens);
    }

    #[test]
    fn replay_rejects_double_and_missing_events() {
        let t = synthetic_trace(2, 2, &[(0, 0, vec![], vec![(0, 1), (0, 2)])], vec![1, 2]);
        assert!(t.replay_tokens().is_err());
        let t = synthetic_trace(2, 2, &[(0, 0, vec![], vec![(0, 1)])], vec![1, 0]);
        assert!(t.replay_tokens().is_err());
    }

    #[test]
    fn compare_self_is_identical() {
        let t = synthetic_trace(2, 2, &[(0, 0, vec![], vec![(0, 1), (1, 0)])], vec![1, 0]);
        let d = compare_traces(&t, &t).unwrap();
        assert!(d.identical());
        assert_eq!(d.agreement, 1.0);
        assert_eq!(d.first_divergent_step, None);
    }

    #[test]
    fn compare_reports_divergence_and_agreement() {
        let a = synthetic_trace(
            2,
            2,
            &[(0, 0, vec![], vec![(0, 1)]), (1, 0, vec![], vec![(1, 0)])],
            vec![1, 0],
        );
        let b = synthetic_trace(
            2,
            2,
            &[(0, 0, vec![], vec![(0, 1)]), (1, 0, vec![], vec![(1, 1)])],
            vec![1, 1],
        );
        let d = compare_traces(&a, &b).unwrap();
        assert_eq!(d.first_divergent_step, Some(1));
        assert!((d.agreement - 0.5).abs() < 1e-12);
    }

    #[test]
    fn compare_rejects_layout_and_model_mismatch() {
        let a = synthetic_trace(2, 2, &[(0, 0, vec![], vec![(0, 1), (1, 0)])], vec![1, 0]);
        let b = synthetic_trace(4, 2, &[(0, 0, vec![], vec![(0, 1)])], vec![1, 0, 0, 0]);
        assert!(matches!(
            compare_traces(&a, &b),
            Err(TraceError::LayoutMismatch(_))
        ));
        let mut c = a.clone();
        c.model = "other".into();
        assert!(compare_traces(&a, &c).is_err());
    }

    #[test]
    fn behavior_bytes_ignore_config_and_acs() {
        let mut a = synthetic_trace(2, 2, &[(0, 0, vec![(0, 1, 0.9)], vec![(0, 1), (1, 0)])], vec![1, 0]);
        let mut b = a.clone();
        b.config.strategy = Strategy::Ahd;
        b.steps[0].acs.insert(1, AcsValue::Finite(0.5));
        b.steps[0].predictions.insert(1, Prediction { token: 0, confidence: 0.4 });
        a.model = "m".into();
        b.model = "m".into();
        assert_eq!(a.behavior_bytes(), b.behavior_bytes());
    }
}

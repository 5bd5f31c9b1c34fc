//! Strategy configuration for a decode run.

use serde::{Deserialize, Serialize};

use super::EngineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Vanilla,
    ConfidenceParallel,
    Ahd,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::ConfidenceParallel => "confidence_parallel",
            Strategy::Ahd => "ahd",
        }
    }
}

/// Whether a future position needs only a small consistency score or
/// additionally a confident anchor to unlock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FutureGating {
    AcsOnly,
    AcsAndConfidence,
}

/// Stability detector for cross-block unlocking. `OneStepKl` is the naive
/// single-step ablation: it compares the anchor against the immediately
/// preceding prediction only, and is deliberately fooled by slow
/// oscillations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityMetric {
    Acs,
    OneStepKl,
}

/// How far past the current block future positions are tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lookahead {
    All,
    Blocks(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// Positions unmasked per step under the vanilla schedule.
    pub tokens_per_step: usize,
    /// Confidence threshold for parallel unmasking (and, under
    /// `AcsAndConfidence`, for future unlocking).
    pub confidence_threshold: f64,
    /// Historical consistency threshold ε; unlock requires score < ε.
    pub epsilon: f64,
    /// Historical buffer length H.
    pub horizon: usize,
    /// Decay rate λ of the history weights.
    pub lambda: f64,
    pub gating: FutureGating,
    pub lookahead: Lookahead,
    pub stability_metric: StabilityMetric,
    /// 0 decodes greedily; > 0 samples from the shaped distribution.
    pub temperature: f64,
    pub seed: u64,
    /// Optional probability floor applied to every model output; 0 = off.
    pub prob_floor: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Vanilla,
            tokens_per_step: 1,
            confidence_threshold: 0.9,
            epsilon: 0.01,
            horizon: 6,
            lambda: 0.5,
            gating: FutureGating::AcsAndConfidence,
            lookahead: Lookahead::All,
            stability_metric: StabilityMetric::Acs,
            temperature: 0.0,
            seed: 0,
            prob_floor: 0.0,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.tokens_per_step < 1 {
            return Err(EngineError::Config("tokens_per_step must be >= 1".into()));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(EngineError::Config(format!(
                "confidence_threshold must be in (0, 1], got {}",
                self.confidence_threshold
            )));
        }
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(EngineError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.prob_floor < 0.0 || self.prob_floor >= 1.0 {
            return Err(EngineError::Config(format!(
                "prob_floor must be in [0, 1), got {}",
                self.prob_floor
            )));
        }
        // Vanilla and confidence_parallel ignore the AHD fields.
        if self.strategy == Strategy::Ahd {
            if self.horizon < 2 {
                return Err(EngineError::Config(format!(
                    "horizon must be >= 2, got {}",
                    self.horizon
                )));
            }
            if self.epsilon < 0.0 || !self.epsilon.is_finite() {
                return Err(EngineError::Config(format!(
                    "epsilon must be >= 0, got {}",
                    self.epsilon
                )));
            }
            if !(self.lambda > 0.0) || !self.lambda.is_finite() {
                return Err(EngineError::Config(format!(
                    "lambda must be > 0, got {}",
                    self.lambda
                )));
            }
            if let Lookahead::Blocks(k) = self.lookahead {
                if k < 1 {
                    return Err(EngineError::Config("lookahead_blocks must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

//! Non-adaptive test oracle: predictions depend only on (step, position),
//! never on token values in the state. This makes exact unlock-timing and
//! ε-monotonicity tests possible, since the prediction stream is invariant
//! under whatever the engine has already committed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::SequenceState;
use crate::prob::Distribution;

use super::{fnv1a, masked_positions, Denoiser, DenoiserError};

pub const SCRIPT_SCHEMA_VERSION: u32 = 1;

/// Per-position prediction rule, evaluated at each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptRule {
    /// Same distribution at every step.
    Constant { dist: Distribution },
    /// `before` until `start − 1`, `after` from `start` on.
    FromStep {
        start: usize,
        before: Distribution,
        after: Distribution,
    },
    /// Square wave: each value held for `hold` consecutive steps.
    Oscillating {
        first: Distribution,
        second: Distribution,
        hold: usize,
    },
    /// Explicit (step, distribution) pairs; other steps use the fallback.
    PerStep { steps: Vec<(usize, Distribution)> },
}

impl ScriptRule {
    fn dist_at(&self, step: usize) -> Option<&Distribution> {
        match self {
            ScriptRule::Constant { dist } => Some(dist),
            ScriptRule::FromStep { start, before, after } => {
                Some(if step < *start { before } else { after })
            }
            ScriptRule::Oscillating { first, second, hold } => {
                Some(if (step / (*hold).max(1)) % 2 == 0 { first } else { second })
            }
            ScriptRule::PerStep { steps } => {
                steps.iter().find(|(s, _)| *s == step).map(|(_, d)| d)
            }
        }
    }

    fn validate(&self, vocab_size: usize) -> Result<(), DenoiserError> {
        let check = |d: &Distribution| -> Result<(), DenoiserError> {
            if d.len() != vocab_size {
                return Err(DenoiserError::Model(format!(
                    "scripted distribution has length {}, vocab is {vocab_size}",
                    d.len()
                )));
            }
            Ok(())
        };
        match self {
            ScriptRule::Constant { dist } => check(dist),
            ScriptRule::FromStep { before, after, .. } => {
                check(before)?;
                check(after)
            }
            ScriptRule::Oscillating { first, second, hold } => {
                if *hold < 1 {
                    return Err(DenoiserError::Model("oscillation hold must be >= 1".into()));
                }
                check(first)?;
                check(second)
            }
            ScriptRule::PerStep { steps } => steps.iter().try_for_each(|(_, d)| check(d)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedOracle {
    schema_version: u32,
    vocab_size: usize,
    fallback: Distribution,
    rules: BTreeMap<usize, ScriptRule>,
}

impl ScriptedOracle {
    pub fn new(vocab_size: usize, fallback: Distribution) -> Result<Self, DenoiserError> {
        if fallback.len() != vocab_size {
            return Err(DenoiserError::Model(format!(
                "fallback has length {}, vocab is {vocab_size}",
                fallback.len()
            )));
        }
        Ok(Self {
            schema_version: SCRIPT_SCHEMA_VERSION,
            vocab_size,
            fallback,
            rules: BTreeMap::new(),
        })
    }

    pub fn with_rule(mut self, pos: usize, rule: ScriptRule) -> Result<Self, DenoiserError> {
        rule.validate(self.vocab_size)?;
        self.rules.insert(pos, rule);
        Ok(self)
    }

    pub fn set_rule(&mut self, pos: usize, rule: ScriptRule) -> Result<(), DenoiserError> {
        rule.validate(self.vocab_size)?;
        self.rules.insert(pos, rule);
        Ok(())
    }

    /// The distribution this oracle emits for `pos` at `step`.
    pub fn dist_at(&self, pos: usize, step: usize) -> &Distribution {
        self.rules
            .get(&pos)
            .and_then(|r| r.dist_at(step))
            .unwrap_or(&self.fallback)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DenoiserError> {
        let oracle: ScriptedOracle = serde_json::from_str(text)?;
        if oracle.schema_version != SCRIPT_SCHEMA_VERSION {
            return Err(DenoiserError::Model(format!(
                "script schema version {} not supported (expected {SCRIPT_SCHEMA_VERSION})",
                oracle.schema_version
            )));
        }
        if oracle.vocab_size < 2 {
            return Err(DenoiserError::Model("script vocab_size must be >= 2".into()));
        }
        if oracle.fallback.len() != oracle.vocab_size {
            return Err(DenoiserError::Model("script fallback length mismatch".into()));
        }
        for rule in oracle.rules.values() {
            rule.validate(oracle.vocab_size)?;
        }
        Ok(oracle)
    }

    pub fn load(path: &Path) -> Result<Self, DenoiserError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), DenoiserError> {
        Ok(std::fs::write(path, self.to_json())?)
    }
}

impl Denoiser for ScriptedOracle {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn predict(
        &self,
        state: &SequenceState,
        step: usize,
    ) -> Result<BTreeMap<usize, Distribution>, DenoiserError> {
        Ok(masked_positions(state)
            .into_iter()
            .map(|pos| (pos, self.dist_at(pos, step).clone()))
            .collect())
    }

    fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("script serializes");
        format!(
            "scripted(vocab={},rules={},hash={:016x})",
            self.vocab_size,
            self.rules.len(),
            fnv1a(bytes)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::BlockLayout;

    fn dist(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn constant_rule_and_fallback() {
        let oracle = ScriptedOracle::new(2, dist(&[0.6, 0.4]))
            .unwrap()
            .with_rule(5, ScriptRule::Constant { dist: dist(&[0.9, 0.1]) })
            .unwrap();
        for step in 0..10 {
            assert_eq!(oracle.dist_at(5, step).prob(0), 0.9);
            assert_eq!(oracle.dist_at(3, step).prob(0), 0.6);
        }
    }

    #[test]
    fn oscillation_alternates_by_hold() {
        let oracle = ScriptedOracle::new(2, dist(&[0.5, 0.5]))
            .unwrap()
            .with_rule(
                0,
                ScriptRule::Oscillating {
                    first: dist(&[0.9, 0.1]),
                    second: dist(&[0.1, 0.9]),
                    hold: 2,
                },
            )
            .unwrap();
        let firsts: Vec<f64> = (0..6).map(|s| oracle.dist_at(0, s).prob(0)).collect();
        assert_eq!(firsts, vec![0.9, 0.9, 0.1, 0.1, 0.9, 0.9]);
    }

    #[test]
    fn from_step_switches_at_start() {
        let oracle = ScriptedOracle::new(2, dist(&[0.5, 0.5]))
            .unwrap()
            .with_rule(
                1,
                ScriptRule::FromStep {
                    start: 3,
                    before: dist(&[0.5, 0.5]),
                    after: dist(&[0.95, 0.05]),
                },
            )
            .unwrap();
        assert_eq!(oracle.dist_at(1, 2).prob(0), 0.5);
        assert_eq!(oracle.dist_at(1, 3).prob(0), 0.95);
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let oracle = ScriptedOracle::new(3, dist(&[0.5, 0.3, 0.2]))
            .unwrap()
            .with_rule(2, ScriptRule::PerStep { steps: vec![(0, dist(&[0.8, 0.1, 0.1]))] })
            .unwrap();
        let text = oracle.to_json();
        assert_eq!(ScriptedOracle::from_json(&text).unwrap(), oracle);
        let bad = text.replace("\"schema_version\": 1", "\"schema_version\": 99");
        assert!(ScriptedOracle::from_json(&bad).is_err());
    }

    #[test]
    fn vocab_size_mismatch_rejected() {
        let r = ScriptedOracle::new(2, dist(&[0.6, 0.4]))
            .unwrap()
            .with_rule(0, ScriptRule::Constant { dist: dist(&[0.5, 0.3, 0.2]) });
        assert!(r.is_err());
    }

    #[test]
    fn predict_covers_exactly_masked_positions() {
        let oracle = ScriptedOracle::new(2, dist(&[0.6, 0.4])).unwrap();
        let layout = BlockLayout::new(0, 4, 2).unwrap();
        let mut state = SequenceState::new(layout, &[], 2).unwrap();
        state.unmask(1, 0).unwrap();
        let preds = oracle.predict(&state, 0).unwrap();
        let keys: Vec<usize> = preds.keys().copied().collect();
        assert_eq!(keys, vec![0, 2, 3]);
    }
}

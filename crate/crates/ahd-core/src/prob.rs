//! Probability-vector arithmetic: distributions over a finite vocabulary,
//! KL divergence, L1 distance, confidence, temperature shaping, and the
//! exponentially decaying weight schedule used by the anchored consistency
//! score.
//!
//! All arithmetic is 64-bit floating point. KL support mismatches yield a
//! distinguished `f64::INFINITY`, never an error: downstream stability
//! gating treats an infinite score as "not stable".

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into a probability vector; doubles as the token id.
pub type TokenId = usize;

/// Absolute tolerance on the sum-to-one invariant at construction.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ProbError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid distribution: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// A probability vector over a finite vocabulary.
///
/// Invariants enforced at construction: every entry is non-negative and
/// finite, the entries sum to 1 within [`SUM_TOLERANCE`], and the length
/// (the vocabulary size) is at least 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distribution {
    probs: Vec<f64>,
}

/// Max-probability summary of a distribution: the confidence score and
/// the argmax token, ties broken toward the lowest token id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenConfidence {
    pub token: TokenId,
    pub prob: f64,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, ProbError> {
        if probs.len() < 2 {
            return Err(ProbError::Domain(format!(
                "vocabulary size must be >= 2, got {}",
                probs.len()
            )));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(ProbError::Domain(format!("entry {i} is {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(ProbError::Domain(format!("entries sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Builds a distribution from non-negative weights by normalizing.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, ProbError> {
        if weights.len() < 2 {
            return Err(ProbError::Domain(format!(
                "vocabulary size must be >= 2, got {}",
                weights.len()
            )));
        }
        let mut sum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(ProbError::Domain(format!("weight {i} is {w}")));
            }
            sum += w;
        }
        if sum <= 0.0 {
            return Err(ProbError::Domain("weights sum to zero".into()));
        }
        let probs = weights.into_iter().map(|w| w / sum).collect();
        Ok(Self { probs })
    }

    /// One-hot distribution at `token`.
    pub fn one_hot(len: usize, token: TokenId) -> Result<Self, ProbError> {
        if token >= len {
            return Err(ProbError::Domain(format!(
                "one-hot token {token} out of range for vocab {len}"
            )));
        }
        let mut probs = vec![0.0; len];
        probs[token] = 1.0;
        Self::new(probs)
    }

    /// Uniform distribution over `len` tokens.
    pub fn uniform(len: usize) -> Result<Self, ProbError> {
        Self::new(vec![1.0 / len as f64; len.max(1)])
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// True when every entry is strictly positive.
    pub fn strictly_positive(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }

    /// Confidence score `s = max_v p(v)` together with the argmax token.
    /// Ties break toward the lowest token id.
    pub fn confidence(&self) -> TokenConfidence {
        let mut best = TokenConfidence {
            token: 0,
            prob: self.probs[0],
        };
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > best.prob {
                best = TokenConfidence { token: i, prob: p };
            }
        }
        best
    }

    /// Clamps every entry up to `floor` and renormalizes. A floor of 0 is
    /// the identity. Guarantees strict positivity for `floor > 0`, so KL
    /// against the result is always finite.
    pub fn with_floor(&self, floor: f64) -> Result<Self, ProbError> {
        if floor < 0.0 || !floor.is_finite() {
            return Err(ProbError::Config(format!("prob_floor must be >= 0, got {floor}")));
        }
        if floor == 0.0 {
            return Ok(self.clone());
        }
        if floor * self.len() as f64 >= 1.0 {
            return Err(ProbError::Config(format!(
                "prob_floor {floor} too large for vocab {}",
                self.len()
            )));
        }
        Self::from_weights(self.probs.iter().map(|&p| p.max(floor)).collect())
    }

    /// Temperature-shaped copy: `t = 0` collapses to a one-hot at the
    /// argmax (greedy); otherwise entries are raised to `1/t` and
    /// renormalized. Entries are scaled by the max first so extreme
    /// temperatures cannot underflow the whole vector.
    pub fn apply_temperature(&self, temperature: f64) -> Result<Self, ProbError> {
        if temperature < 0.0 || !temperature.is_finite() {
            return Err(ProbError::Config(format!(
                "temperature must be >= 0, got {temperature}"
            )));
        }
        if temperature == 0.0 {
            return Self::one_hot(self.len(), self.confidence().token);
        }
        let max = self.confidence().prob;
        let inv = 1.0 / temperature;
        Self::from_weights(self.probs.iter().map(|&p| (p / max).powf(inv)).collect())
    }
}

/// KL divergence `Σ_v p(v)·ln(p(v)/q(v))` with the conventions
/// `0·ln(0/q) = 0` and `p(v) > 0 ∧ q(v) = 0 → +∞`.
///
/// The result is non-negative for valid distributions (Gibbs); floating
/// point residue below zero is clamped to 0.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64, ProbError> {
    if p.len() != q.len() {
        return Err(ProbError::Dimension {
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut sum = 0.0;
    for (&pv, &qv) in p.as_slice().iter().zip(q.as_slice()) {
        if pv == 0.0 {
            continue;
        }
        if qv == 0.0 {
            return Ok(f64::INFINITY);
        }
        sum += pv * (pv / qv).ln();
    }
    Ok(sum.max(0.0))
}

/// Total variation-style L1 distance `Σ_v |p(v) − q(v)|`, in `[0, 2]`.
pub fn l1_distance(p: &Distribution, q: &Distribution) -> Result<f64, ProbError> {
    if p.len() != q.len() {
        return Err(ProbError::Dimension {
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(p.as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&pv, &qv)| (pv - qv).abs())
        .sum())
}

/// Exponentially decaying weights `w_τ = e^{−λτ}/Z` for backtrack offsets
/// `τ = 1..H−1`, with `Z = Σ_{k=1}^{H−1} e^{−λk}`.
///
/// The weights sum to 1, are strictly positive, and strictly decrease in
/// τ, so `w_1` dominates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayWeights {
    lambda: f64,
    horizon: usize,
    weights: Vec<f64>,
}

impl DecayWeights {
    pub fn new(lambda: f64, horizon: usize) -> Result<Self, ProbError> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(ProbError::Config(format!("lambda must be > 0, got {lambda}")));
        }
        if horizon < 2 {
            return Err(ProbError::Config(format!(
                "horizon must be >= 2, got {horizon}"
            )));
        }
        let terms: Vec<f64> = (1..horizon).map(|tau| (-lambda * tau as f64).exp()).collect();
        let z: f64 = terms.iter().sum();
        if z == 0.0 {
            return Err(ProbError::Config(format!(
                "decay weights underflow for lambda {lambda}, horizon {horizon}"
            )));
        }
        Ok(Self {
            lambda,
            horizon,
            weights: terms.into_iter().map(|t| t / z).collect(),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Weight for backtrack offset `tau` in `1..=H−1`.
    pub fn weight(&self, tau: usize) -> f64 {
        self.weights[tau - 1]
    }

    /// All weights, indexed by `τ − 1`.
    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

/// Anchored consistency score: `Σ_{τ=1}^{H−1} w_τ · KL(anchor ‖ P_{t−τ})`.
///
/// `history` is ordered oldest→newest and must hold exactly `H−1`
/// entries; entry `k` sits at backtrack offset `τ = (H−1) − k`. An
/// infinite KL term makes the whole score infinite.
pub fn anchored_consistency_score(
    anchor: &Distribution,
    history: &[Distribution],
    weights: &DecayWeights,
) -> Result<f64, ProbError> {
    let h = weights.horizon();
    if history.len() != h - 1 {
        return Err(ProbError::Dimension {
            expected: h - 1,
            got: history.len(),
        });
    }
    let mut score = 0.0;
    for tau in 1..h {
        let entry = &history[(h - 1) - tau];
        let kl = kl_divergence(anchor, entry)?;
        if kl.is_infinite() {
            return Ok(f64::INFINITY);
        }
        score += weights.weight(tau) * kl;
    }
    Ok(score)
}

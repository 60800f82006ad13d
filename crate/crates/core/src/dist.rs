//! Probability-distribution primitives.
//!
//! Entropies are in nats. Whenever tokens are ranked, the order is
//! descending probability with ties broken by ascending token index, so
//! every truncation is deterministic across runs and platforms.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Method;

/// Tolerance on the total mass of a distribution.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Slack used when comparing cumulative mass against a threshold, so that
/// a threshold of exactly 1.0 keeps the whole distribution despite rounding.
const CUMULATIVE_SLACK: f64 = 1e-12;

/// A normalized probability vector over token indices `0..V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    /// Validates an already-normalized probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entry {i} is {p}; probabilities must be finite and non-negative"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(vocab: usize) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::InvalidDistribution("empty vocabulary".into()));
        }
        Ok(Self {
            probs: vec![1.0 / vocab as f64; vocab],
        })
    }

    pub fn one_hot(vocab: usize, index: usize) -> Result<Self> {
        if index >= vocab {
            return Err(Error::InvalidDistribution(format!(
                "index {index} outside vocabulary of {vocab}"
            )));
        }
        let mut probs = vec![0.0; vocab];
        probs[index] = 1.0;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Highest-probability token, lowest index on ties.
    pub fn argmax(&self) -> usize {
        ranked_indices(&self.probs)[0]
    }

    /// Token indices sorted by descending probability, then ascending index.
    pub fn ranked(&self) -> Vec<usize> {
        ranked_indices(&self.probs)
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Renormalized restriction to `kept`; other tokens get probability 0.
    pub fn restrict(&self, kept: &[usize]) -> Result<Self> {
        let mut covered = vec![false; self.probs.len()];
        for &i in kept {
            covered[i] = true;
        }
        if self.probs.iter().zip(&covered).all(|(p, c)| *c || *p == 0.0) {
            return Ok(self.clone());
        }
        let mut weights = vec![0.0; self.probs.len()];
        for &i in kept {
            weights[i] = self.probs[i];
        }
        normalize(&weights)
    }
}

impl TryFrom<Vec<f64>> for TokenDistribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<TokenDistribution> for Vec<f64> {
    fn from(d: TokenDistribution) -> Self {
        d.probs
    }
}

/// Raw next-token scores, all finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitVector {
    logits: Vec<f64>,
}

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Data("empty logit vector".into()));
        }
        if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
            return Err(Error::Data(format!("logit {i} is not finite")));
        }
        Ok(Self { logits })
    }

    pub fn values(&self) -> &[f64] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Plain softmax.
    pub fn softmax(&self) -> TokenDistribution {
        softmax_scaled(&self.logits, 1.0)
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LogitVector> for Vec<f64> {
    fn from(l: LogitVector) -> Self {
        l.logits
    }
}

/// Outcome of one truncation step.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdDecision {
    /// Threshold actually applied (cumulative mass, k, or probability cutoff
    /// depending on the method).
    pub effective_threshold: f64,
    /// Kept token indices, in rank order.
    pub kept: Vec<usize>,
    /// Distribution renormalized over `kept`, full vocabulary length.
    pub dist: TokenDistribution,
    pub trace: DecisionTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub method: Method,
    /// Residual entropy driving the threshold, for the REAL family of methods.
    pub d_re: Option<f64>,
    /// Threshold before clamping or rounding.
    pub raw_threshold: f64,
}

impl ThresholdDecision {
    pub fn kept_count(&self) -> usize {
        self.kept.len()
    }

    pub(crate) fn from_kept(
        source: &TokenDistribution,
        kept: Vec<usize>,
        effective_threshold: f64,
        trace: DecisionTrace,
    ) -> Result<Self> {
        let dist = source.restrict(&kept)?;
        Ok(Self {
            effective_threshold,
            kept,
            dist,
            trace,
        })
    }
}

pub(crate) fn ranked_indices(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Scales non-negative weights to a probability vector.
pub fn normalize(weights: &[f64]) -> Result<TokenDistribution> {
    if weights.is_empty() {
        return Err(Error::InvalidDistribution("empty weight vector".into()));
    }
    if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "weight {i} is {w}; weights must be finite and non-negative"
        )));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::InvalidDistribution("weights have no positive mass".into()));
    }
    Ok(TokenDistribution {
        probs: weights.iter().map(|w| w / total).collect(),
    })
}

/// Shannon entropy in nats, with 0 log 0 = 0.
pub fn entropy(dist: &TokenDistribution) -> f64 {
    entropy_of(dist.probs())
}

pub(crate) fn entropy_of(probs: &[f64]) -> f64 {
    let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.max(0.0)
}

/// Nucleus truncation: keep the longest ranked prefix whose cumulative mass
/// does not exceed `threshold`, but never fewer than one token.
pub fn truncate_top_p(dist: &TokenDistribution, threshold: f64) -> Result<ThresholdDecision> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Parameter(format!("top-p threshold {threshold} outside [0, 1]")));
    }
    let kept = top_p_prefix(dist, threshold);
    ThresholdDecision::from_kept(
        dist,
        kept,
        threshold,
        DecisionTrace {
            method: Method::TopP,
            d_re: None,
            raw_threshold: threshold,
        },
    )
}

pub(crate) fn top_p_prefix(dist: &TokenDistribution, threshold: f64) -> Vec<usize> {
    let ranked = dist.ranked();
    let mut cumulative = 0.0;
    let mut keep = 0;
    for &i in &ranked {
        cumulative += dist.probs[i];
        if cumulative <= threshold + CUMULATIVE_SLACK {
            keep += 1;
        } else {
            break;
        }
    }
    let keep = keep.max(1);
    ranked[..keep].to_vec()
}

/// Rounds a possibly fractional k half-up, floors at 1 and caps at `vocab`.
pub fn effective_k(k: f64, vocab: usize) -> usize {
    let rounded = (k + 0.5).floor();
    let k = if rounded.is_finite() && rounded >= 1.0 {
        rounded as usize
    } else {
        1
    };
    k.min(vocab)
}

/// Keep the `k` highest-probability tokens (ties to the lower index).
pub fn truncate_top_k(dist: &TokenDistribution, k: f64) -> Result<ThresholdDecision> {
    if !k.is_finite() {
        return Err(Error::Parameter(format!("top-k value {k} is not finite")));
    }
    let keep = effective_k(k, dist.len());
    let mut ranked = dist.ranked();
    ranked.truncate(keep);
    ThresholdDecision::from_kept(
        dist,
        ranked,
        keep as f64,
        DecisionTrace {
            method: Method::TopK,
            d_re: None,
            raw_threshold: k,
        },
    )
}

fn softmax_scaled(logits: &[f64], tau: f64) -> TokenDistribution {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    TokenDistribution {
        probs: exps.into_iter().map(|e| e / total).collect(),
    }
}

/// Softmax of `logits / tau`.
pub fn apply_temperature(logits: &LogitVector, tau: f64) -> Result<TokenDistribution> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    Ok(softmax_scaled(logits.values(), tau))
}

/// Draws a token index by inverse-CDF sampling.
pub fn sample<R: Rng + ?Sized>(dist: &TokenDistribution, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cumulative += p;
        last_positive = i;
        if u < cumulative {
            return i;
        }
    }
    // u landed in the rounding gap above the final cumulative sum.
    last_positive
}

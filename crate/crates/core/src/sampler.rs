//! Truncation samplers and the single-step decoder.
//!
//! The REAL family converts a residual entropy `d` into a nucleus threshold
//! `exp(-d / T)`: a flat decay curve (nothing left to learn from a larger
//! model) keeps the full distribution, a steep one cuts deep.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decay::{residual_entropy, DecayCurve, ModelFamilySpec};
use crate::dist::{
    apply_temperature, effective_k, entropy, normalize, ranked_indices, sample, top_p_prefix, truncate_top_k,
    DecisionTrace, LogitVector, ThresholdDecision, TokenDistribution,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TopP,
    TopK,
    Temperature,
    Eta,
    Typical,
    Factual,
    Real,
    RealCd,
    RealTopK,
    RealF,
    Cd,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::TopP,
        Method::TopK,
        Method::Temperature,
        Method::Eta,
        Method::Typical,
        Method::Factual,
        Method::Real,
        Method::RealCd,
        Method::RealTopK,
        Method::RealF,
        Method::Cd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::TopP => "top_p",
            Method::TopK => "top_k",
            Method::Temperature => "temperature",
            Method::Eta => "eta",
            Method::Typical => "typical",
            Method::Factual => "factual",
            Method::Real => "real",
            Method::RealCd => "real_cd",
            Method::RealTopK => "real_top_k",
            Method::RealF => "real_f",
            Method::Cd => "cd",
        }
    }

    /// Methods whose threshold depends on a decay curve.
    pub fn needs_curve(self) -> bool {
        matches!(self, Method::Real | Method::RealCd | Method::RealTopK | Method::RealF)
    }

    /// Methods that rescore with an amateur model.
    pub fn needs_amateur(self) -> bool {
        matches!(self, Method::RealCd | Method::Cd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '+'], "_");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown sampling method `{s}`")))
    }
}

/// Hyperparameters for [`decode_step`]. Only the fields used by the chosen
/// method need to be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: Method,
    /// Nucleus threshold for `top_p`.
    pub top_p: Option<f64>,
    /// k for `top_k`, base k for `real_top_k`.
    pub top_k: Option<f64>,
    /// REAL temperature T.
    pub real_temperature: Option<f64>,
    /// Softmax temperature applied to expert logits before truncation.
    pub tau: Option<f64>,
    pub eta: Option<f64>,
    pub typical_mass: Option<f64>,
    pub cd_alpha: f64,
    pub f_lambda: f64,
    pub f_upper: f64,
    pub f_lower: f64,
    /// Token indices that end a sentence, for the factual methods.
    pub sentence_terminals: BTreeSet<usize>,
}

impl SamplerConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            top_p: None,
            top_k: None,
            real_temperature: None,
            tau: None,
            eta: None,
            typical_mass: None,
            cd_alpha: 0.3,
            f_lambda: 0.9,
            f_upper: 0.9,
            f_lower: 0.3,
            sentence_terminals: BTreeSet::new(),
        }
    }

    pub fn top_p(p: f64) -> Self {
        Self {
            top_p: Some(p),
            ..Self::new(Method::TopP)
        }
    }

    pub fn real(method: Method, t: f64) -> Self {
        Self {
            real_temperature: Some(t),
            ..Self::new(method)
        }
    }

    fn require(value: Option<f64>, name: &str, method: Method) -> Result<f64> {
        value.ok_or_else(|| Error::Config(format!("method {method} requires {name}")))
    }

    /// Checks that every value the method uses is present and in range.
    pub fn validate(&self) -> Result<()> {
        let m = self.method;
        if let Some(tau) = self.tau {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::Config(format!("tau must be > 0, got {tau}")));
            }
        }
        match m {
            Method::TopP => {
                let p = Self::require(self.top_p, "top_p", m)?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("top_p must be in [0, 1], got {p}")));
                }
            }
            Method::TopK | Method::RealTopK => {
                let k = Self::require(self.top_k, "top_k", m)?;
                if !(k >= 1.0) || !k.is_finite() {
                    return Err(Error::Config(format!("top_k must be >= 1, got {k}")));
                }
            }
            Method::Temperature => {
                Self::require(self.tau, "tau", m)?;
            }
            Method::Eta => {
                let eta = Self::require(self.eta, "eta", m)?;
                if !(eta > 0.0 && eta < 1.0) {
                    return Err(Error::Config(format!("eta must be in (0, 1), got {eta}")));
                }
            }
            Method::Typical => {
                let mass = Self::require(self.typical_mass, "typical_mass", m)?;
                if !(mass > 0.0 && mass <= 1.0) {
                    return Err(Error::Config(format!("typical_mass must be in (0, 1], got {mass}")));
                }
            }
            Method::Cd => {
                if !(0.0..=1.0).contains(&self.cd_alpha) {
                    return Err(Error::Config(format!(
                        "cd_alpha must be in [0, 1], got {}",
                        self.cd_alpha
                    )));
                }
            }
            Method::Factual | Method::Real | Method::RealCd | Method::RealF => {}
        }
        if matches!(m, Method::Factual | Method::RealF) {
            if !(self.f_lambda > 0.0 && self.f_lambda < 1.0) {
                return Err(Error::Config(format!(
                    "f_lambda must be in (0, 1), got {}",
                    self.f_lambda
                )));
            }
            if !(self.f_lower >= 0.0 && self.f_lower <= self.f_upper && self.f_upper <= 1.0) {
                return Err(Error::Config("need 0 <= f_lower <= f_upper <= 1".into()));
            }
        }
        if matches!(m, Method::Real | Method::RealCd | Method::RealF) {
            let t = Self::require(self.real_temperature, "REAL temperature T", m)?;
            if !(t > 0.0) {
                return Err(Error::Config(format!("REAL temperature must be > 0, got {t}")));
            }
        }
        Ok(())
    }
}

/// Per-session decoding state.
#[derive(Debug, Clone)]
pub struct DecodeState {
    /// Distance to the last sentence terminal; 1 for the first token after it.
    pub tokens_since_period: u64,
    pub step: u64,
    rng: ChaCha8Rng,
}

impl DecodeState {
    pub fn new(seed: u64) -> Self {
        Self {
            tokens_since_period: 1,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn advance(&mut self, token: usize, terminals: &BTreeSet<usize>) {
        self.step += 1;
        if terminals.contains(&token) {
            self.tokens_since_period = 1;
        } else {
            self.tokens_since_period += 1;
        }
    }
}

/// `exp(-d / T)`.
pub fn real_threshold(d_re: f64, temperature: f64) -> Result<f64> {
    if !(d_re >= 0.0) {
        return Err(Error::Parameter(format!("residual entropy must be >= 0, got {d_re}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "REAL temperature must be > 0, got {temperature}"
        )));
    }
    Ok((-d_re / temperature).exp())
}

/// Factual-sampling threshold `max(lower, upper * lambda^(x-1))`.
pub fn factual_threshold(tokens_since_period: u64, upper: f64, lambda: f64, lower: f64) -> f64 {
    let x = tokens_since_period.max(1);
    (upper * lambda.powf((x - 1) as f64)).max(lower)
}

/// REAL combined with factual decay: `max(lower, lambda^(x-1)) * exp(-d / T)`.
/// The decay factor has no leading `upper` multiplier.
pub fn real_f_threshold(tokens_since_period: u64, d_re: f64, temperature: f64, lambda: f64, lower: f64) -> Result<f64> {
    let x = tokens_since_period.max(1);
    Ok(lambda.powf((x - 1) as f64).max(lower) * real_threshold(d_re, temperature)?)
}

/// `t_k * exp(-d)`, before rounding to an integer k.
pub fn real_top_k_threshold(t_k: f64, d_re: f64) -> Result<f64> {
    if !(d_re >= 0.0) {
        return Err(Error::Parameter(format!("residual entropy must be >= 0, got {d_re}")));
    }
    Ok(t_k * (-d_re).exp())
}

fn decision(
    source: &TokenDistribution,
    kept: Vec<usize>,
    effective: f64,
    method: Method,
    d_re: Option<f64>,
    raw: f64,
) -> Result<ThresholdDecision> {
    ThresholdDecision::from_kept(
        source,
        kept,
        effective,
        DecisionTrace {
            method,
            d_re,
            raw_threshold: raw,
        },
    )
}

/// Eta truncation: keep tokens with `p >= min(eta, sqrt(eta) * exp(-H))`.
pub fn eta_truncate(dist: &TokenDistribution, eta: f64) -> Result<ThresholdDecision> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Parameter(format!("eta must be in (0, 1), got {eta}")));
    }
    let cutoff = eta.min(eta.sqrt() * (-entropy(dist)).exp());
    let ranked = dist.ranked();
    let mut kept: Vec<usize> = ranked.iter().copied().filter(|&i| dist.probs()[i] >= cutoff).collect();
    if kept.is_empty() {
        kept.push(ranked[0]);
    }
    decision(dist, kept, cutoff, Method::Eta, None, eta)
}

/// Locally typical truncation: rank tokens by `|-ln p - H|` (then higher
/// probability, then lower index) and keep the shortest prefix reaching
/// `mass`. This can exclude the argmax when it is atypically likely.
pub fn typical_truncate(dist: &TokenDistribution, mass: f64) -> Result<ThresholdDecision> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::Parameter(format!("typical mass must be in (0, 1], got {mass}")));
    }
    let h = entropy(dist);
    let p = dist.probs();
    let score = |i: usize| {
        if p[i] > 0.0 {
            (-p[i].ln() - h).abs()
        } else {
            f64::INFINITY
        }
    };
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        score(a)
            .total_cmp(&score(b))
            .then(p[b].total_cmp(&p[a]))
            .then(a.cmp(&b))
    });
    let mut kept = Vec::new();
    let mut cumulative = 0.0;
    for i in order {
        kept.push(i);
        cumulative += p[i];
        if cumulative >= mass - 1e-12 {
            break;
        }
    }
    decision(dist, kept, mass, Method::Typical, None, mass)
}

/// Softmax of `expert - amateur` over `kept`; zero elsewhere.
pub fn contrastive_adjust(expert: &LogitVector, amateur: &LogitVector, kept: &[usize]) -> Result<TokenDistribution> {
    if expert.len() != amateur.len() {
        return Err(Error::Shape(format!(
            "expert has {} logits, amateur has {}",
            expert.len(),
            amateur.len()
        )));
    }
    if kept.is_empty() {
        return Err(Error::Parameter("contrastive kept set is empty".into()));
    }
    if let Some(&i) = kept.iter().find(|&&i| i >= expert.len()) {
        return Err(Error::Shape(format!("kept token {i} outside vocabulary")));
    }
    let diff = |i: usize| expert.values()[i] - amateur.values()[i];
    let max = kept.iter().map(|&i| diff(i)).fold(f64::NEG_INFINITY, f64::max);
    let mut weights = vec![0.0; expert.len()];
    for &i in kept {
        weights[i] = (diff(i) - max).exp();
    }
    normalize(&weights)
}

/// Adaptive plausibility set: tokens with `p >= alpha * max p`, rank order.
pub fn cd_plausibility_set(expert_dist: &TokenDistribution, alpha: f64) -> Vec<usize> {
    let cutoff = alpha * expert_dist.max_prob();
    ranked_indices(expert_dist.probs())
        .into_iter()
        .filter(|&i| expert_dist.probs()[i] >= cutoff)
        .collect()
}

/// Result of one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub token: usize,
    pub decision: ThresholdDecision,
}

/// One JSONL line of a decision trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub method: Method,
    #[serde(rename = "d_RE")]
    pub d_re: Option<f64>,
    pub raw_threshold: f64,
    pub effective_threshold: f64,
    pub kept_count: usize,
    pub sampled_token: usize,
}

impl TraceRecord {
    pub fn new(step: u64, outcome: &StepOutcome) -> Self {
        let d = &outcome.decision;
        Self {
            step,
            method: d.trace.method,
            d_re: d.trace.d_re,
            raw_threshold: d.trace.raw_threshold,
            effective_threshold: d.effective_threshold,
            kept_count: d.kept_count(),
            sampled_token: outcome.token,
        }
    }
}

/// Computes the method's truncation for one step without sampling.
pub fn threshold_step(
    config: &SamplerConfig,
    expert_logits: &LogitVector,
    amateur_logits: Option<&LogitVector>,
    curve: Option<&DecayCurve>,
    family: Option<&ModelFamilySpec>,
    tokens_since_period: u64,
) -> Result<ThresholdDecision> {
    config.validate()?;
    let method = config.method;
    let amateur = if method.needs_amateur() {
        Some(amateur_logits.ok_or_else(|| Error::Config(format!("method {method} requires amateur logits")))?)
    } else {
        None
    };
    let d_re = if method.needs_curve() {
        let curve = curve.ok_or_else(|| Error::Config(format!("method {method} requires a decay curve")))?;
        let family = family.ok_or_else(|| Error::Config(format!("method {method} requires the model family")))?;
        Some(residual_entropy(curve, family.largest()))
    } else {
        None
    };

    let dist = match config.tau {
        Some(tau) => apply_temperature(expert_logits, tau)?,
        None => expert_logits.softmax(),
    };

    let mut dec = match method {
        Method::TopP => {
            let t = config.top_p.expect("validated");
            decision(&dist, top_p_prefix(&dist, t), t, method, None, t)?
        }
        Method::TopK => {
            let mut d = truncate_top_k(&dist, config.top_k.expect("validated"))?;
            d.trace.method = method;
            d
        }
        Method::Temperature => {
            let tau = config.tau.expect("validated");
            decision(&dist, dist.ranked(), 1.0, method, None, tau)?
        }
        Method::Eta => eta_truncate(&dist, config.eta.expect("validated"))?,
        Method::Typical => typical_truncate(&dist, config.typical_mass.expect("validated"))?,
        Method::Factual => {
            let t = factual_threshold(tokens_since_period, config.f_upper, config.f_lambda, config.f_lower);
            decision(&dist, top_p_prefix(&dist, t), t, method, None, t)?
        }
        Method::Real | Method::RealCd => {
            let d = d_re.expect("checked");
            let t = real_threshold(d, config.real_temperature.expect("validated"))?;
            decision(&dist, top_p_prefix(&dist, t), t, method, Some(d), t)?
        }
        Method::RealF => {
            let d = d_re.expect("checked");
            let t = real_f_threshold(
                tokens_since_period,
                d,
                config.real_temperature.expect("validated"),
                config.f_lambda,
                config.f_lower,
            )?;
            decision(&dist, top_p_prefix(&dist, t), t, method, Some(d), t)?
        }
        Method::RealTopK => {
            let d = d_re.expect("checked");
            let raw = real_top_k_threshold(config.top_k.expect("validated"), d)?;
            let k = effective_k(raw, dist.len());
            let mut ranked = dist.ranked();
            ranked.truncate(k);
            decision(&dist, ranked, k as f64, method, Some(d), raw)?
        }
        Method::Cd => {
            let kept = cd_plausibility_set(&dist, config.cd_alpha);
            let cutoff = config.cd_alpha * dist.max_prob();
            decision(&dist, kept, cutoff, method, None, config.cd_alpha)?
        }
    };

    if let Some(amateur) = amateur {
        dec.dist = contrastive_adjust(expert_logits, amateur, &dec.kept)?;
    }
    Ok(dec)
}

/// Truncates, optionally rescores, samples a token and advances `state`.
pub fn decode_step(
    config: &SamplerConfig,
    expert_logits: &LogitVector,
    amateur_logits: Option<&LogitVector>,
    curve: Option<&DecayCurve>,
    family: Option<&ModelFamilySpec>,
    state: &mut DecodeState,
) -> Result<StepOutcome> {
    let decision = threshold_step(
        config,
        expert_logits,
        amateur_logits,
        curve,
        family,
        state.tokens_since_period,
    )?;
    let token = sample(&decision.dist, &mut state.rng);
    state.advance(token, &config.sentence_terminals);
    Ok(StepOutcome { token, decision })
}

//! Entropy-decay curves over log model size.
//!
//! A [`DecayCurve`] is a non-increasing function of `s` (natural log of the
//! non-embedding parameter count) that approaches its asymptote `z` as
//! `s` grows. Curves are fitted per context by multi-start
//! Levenberg-Marquardt on the root-mean-square error.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Default highest inverse power of the fractional polynomial.
pub const DEFAULT_K: usize = 10;

/// Sizes of a model family, natural log of non-embedding parameter counts,
/// smallest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFamily")]
pub struct ModelFamilySpec {
    sizes: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct RawFamily {
    sizes: Vec<f64>,
    #[serde(default)]
    labels: Option<Vec<String>>,
}

impl TryFrom<RawFamily> for ModelFamilySpec {
    type Error = Error;

    fn try_from(raw: RawFamily) -> Result<Self> {
        let mut fam = ModelFamilySpec::new(raw.sizes)?;
        if let Some(labels) = raw.labels {
            fam = fam.with_labels(labels)?;
        }
        Ok(fam)
    }
}

impl ModelFamilySpec {
    pub fn new(sizes: Vec<f64>) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::Shape(format!(
                "a model family needs at least 3 sizes to constrain an asymptote, got {}",
                sizes.len()
            )));
        }
        if sizes.iter().any(|s| !s.is_finite()) {
            return Err(Error::Data("model sizes must be finite".into()));
        }
        if sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("model sizes must be strictly increasing".into()));
        }
        Ok(Self { sizes, labels: None })
    }

    /// Builds a family from raw parameter counts (embeddings excluded).
    pub fn from_param_counts(counts: &[f64]) -> Result<Self> {
        if counts.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Data("parameter counts must be positive".into()));
        }
        Self::new(counts.iter().map(|c| c.ln()).collect())
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.sizes.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} sizes",
                labels.len(),
                self.sizes.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn sizes(&self) -> &[f64] {
        &self.sizes
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Log size of the largest member.
    pub fn largest(&self) -> f64 {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn smallest(&self) -> f64 {
        self.sizes[0]
    }

    /// The first `n` members, used for held-out-size experiments.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        let mut fam = Self::new(self.sizes[..n.min(self.sizes.len())].to_vec())?;
        if let Some(labels) = &self.labels {
            fam.labels = Some(labels[..fam.sizes.len()].to_vec());
        }
        Ok(fam)
    }
}

/// Per-context entropies measured across a model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub context_id: String,
    pub position: u64,
    /// Next-token entropy in nats, one per family size.
    pub entropies: Vec<f64>,
    /// Surprisal of the realized next token in nats, one per family size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surprisals: Option<Vec<f64>>,
}

impl EntropyProfile {
    pub fn new(context_id: impl Into<String>, position: u64, entropies: Vec<f64>) -> Self {
        Self {
            context_id: context_id.into(),
            position,
            entropies,
            surprisals: None,
        }
    }

    pub fn with_surprisals(mut self, surprisals: Vec<f64>) -> Self {
        self.surprisals = Some(surprisals);
        self
    }

    /// Checks shape against a family of `n` sizes and value ranges.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.entropies.len() != n {
            return Err(Error::Shape(format!(
                "profile {}:{} has {} entropies, family has {} sizes",
                self.context_id,
                self.position,
                self.entropies.len(),
                n
            )));
        }
        if let Some(i) = self.entropies.iter().position(|e| !e.is_finite()) {
            return Err(Error::Data(format!(
                "profile {}:{} entropy {i} is not finite",
                self.context_id, self.position
            )));
        }
        if let Some(i) = self.entropies.iter().position(|e| *e < 0.0) {
            return Err(Error::Data(format!(
                "profile {}:{} entropy {i} is negative",
                self.context_id, self.position
            )));
        }
        if let Some(s) = &self.surprisals {
            if s.len() != n {
                return Err(Error::Shape(format!(
                    "profile {}:{} has {} surprisals, family has {} sizes",
                    self.context_id,
                    self.position,
                    s.len(),
                    n
                )));
            }
            if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Data(format!(
                    "profile {}:{} has a negative or non-finite surprisal",
                    self.context_id, self.position
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    FractionalPolynomial,
    Exponential,
    Logistic,
}

impl FromStr for CurveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp" | "fractional_polynomial" => Ok(Self::FractionalPolynomial),
            "exp" | "exponential" => Ok(Self::Exponential),
            "logistic" => Ok(Self::Logistic),
            other => Err(Error::Parameter(format!("unknown curve kind `{other}`"))),
        }
    }
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FractionalPolynomial => "fractional_polynomial",
            Self::Exponential => "exponential",
            Self::Logistic => "logistic",
        })
    }
}

/// Non-increasing entropy-vs-log-size curve. All parameters are
/// non-negative. `a_half` and `a` are only used by the fractional
/// polynomial, where `a[k - 1]` weights `x^-k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub kind: CurveKind,
    pub z: f64,
    pub b: f64,
    pub q: f64,
    pub g: f64,
    #[serde(default)]
    pub a_half: f64,
    #[serde(default)]
    pub a: Vec<f64>,
}

impl DecayCurve {
    pub fn new(kind: CurveKind, z: f64, b: f64, q: f64, g: f64, a_half: f64, a: Vec<f64>) -> Result<Self> {
        let curve = Self {
            kind,
            z,
            b,
            q,
            g,
            a_half,
            a,
        };
        curve.validate()?;
        Ok(curve)
    }

    /// A curve that is `z` everywhere.
    pub fn flat(z: f64) -> Self {
        Self {
            kind: CurveKind::FractionalPolynomial,
            z,
            b: 0.0,
            q: 0.0,
            g: 0.0,
            a_half: 0.0,
            a: vec![0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut all = vec![self.z, self.b, self.q, self.g, self.a_half];
        all.extend_from_slice(&self.a);
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter(
                "curve parameters must be finite and non-negative".into(),
            ));
        }
        if self.kind == CurveKind::FractionalPolynomial && self.a.is_empty() {
            return Err(Error::Parameter("fractional polynomial needs K >= 1".into()));
        }
        Ok(())
    }

    /// Highest inverse power K (0 for non-polynomial kinds).
    pub fn k(&self) -> usize {
        match self.kind {
            CurveKind::FractionalPolynomial => self.a.len(),
            _ => 0,
        }
    }

    /// Number of free parameters.
    fn param_count(kind: CurveKind, k: usize) -> usize {
        match kind {
            CurveKind::FractionalPolynomial => 5 + k,
            _ => 4,
        }
    }

    #[cfg(test)]
    fn to_params(&self) -> Vec<f64> {
        let mut p = vec![self.z, self.b, self.q, self.g];
        if self.kind == CurveKind::FractionalPolynomial {
            p.push(self.a_half);
            p.extend_from_slice(&self.a);
        }
        p
    }

    fn from_params(kind: CurveKind, p: &[f64]) -> Self {
        let (a_half, a) = match kind {
            CurveKind::FractionalPolynomial => (p[4], p[5..].to_vec()),
            _ => (0.0, Vec::new()),
        };
        Self {
            kind,
            z: p[0],
            b: p[1],
            q: p[2],
            g: p[3],
            a_half,
            a,
        }
    }

    /// The decay term `e(s) - z` together with its gradient with respect to
    /// the parameter vector `[z, b, q, g, a_half, a_1..a_K]` (`grad[0]` is
    /// always 1).
    fn decay_with_grad(&self, s: f64, grad: &mut [f64]) -> f64 {
        let m = self.q * (s - self.g);
        grad[0] = 1.0;
        match self.kind {
            CurveKind::FractionalPolynomial => {
                let x = m.max(1.0);
                let inv_sqrt = 1.0 / x.sqrt();
                let mut shape = self.a_half * inv_sqrt;
                let mut dshape_dx = -0.5 * self.a_half * inv_sqrt / x;
                grad[4] = self.b * inv_sqrt;
                let mut pow = 1.0;
                for (k, ak) in self.a.iter().enumerate() {
                    pow /= x;
                    shape += ak * pow;
                    dshape_dx -= (k + 1) as f64 * ak * pow / x;
                    grad[5 + k] = self.b * pow;
                }
                grad[1] = shape;
                if m > 1.0 {
                    grad[2] = self.b * dshape_dx * (s - self.g);
                    grad[3] = -self.b * dshape_dx * self.q;
                } else {
                    grad[2] = 0.0;
                    grad[3] = 0.0;
                }
                self.b * shape
            }
            CurveKind::Exponential => {
                let e = (-m.max(0.0)).exp();
                grad[1] = e;
                if m > 0.0 {
                    grad[2] = -self.b * e * (s - self.g);
                    grad[3] = self.b * e * self.q;
                } else {
                    grad[2] = 0.0;
                    grad[3] = 0.0;
                }
                self.b * e
            }
            CurveKind::Logistic => {
                let l = 1.0 / (1.0 + m.max(0.0).exp());
                grad[1] = l;
                if m > 0.0 {
                    let dl_dm = -l * (1.0 - l);
                    grad[2] = self.b * dl_dm * (s - self.g);
                    grad[3] = -self.b * dl_dm * self.q;
                } else {
                    grad[2] = 0.0;
                    grad[3] = 0.0;
                }
                self.b * l
            }
        }
    }

    fn decay(&self, s: f64) -> f64 {
        let m = self.q * (s - self.g);
        match self.kind {
            CurveKind::FractionalPolynomial => {
                let x = m.max(1.0);
                let mut shape = self.a_half / x.sqrt();
                let mut pow = 1.0;
                for ak in &self.a {
                    pow /= x;
                    shape += ak * pow;
                }
                self.b * shape
            }
            CurveKind::Exponential => self.b * (-m.max(0.0)).exp(),
            CurveKind::Logistic => self.b / (1.0 + m.max(0.0).exp()),
        }
    }
}

/// Predicted entropy at log size `s`.
pub fn eval_curve(curve: &DecayCurve, s: f64) -> f64 {
    curve.z + curve.decay(s)
}

/// Limit of the curve as `s` grows without bound.
pub fn asymptote(curve: &DecayCurve) -> f64 {
    curve.z
}

/// Predicted entropy at the largest size minus the asymptote.
pub fn residual_entropy(curve: &DecayCurve, s_largest: f64) -> f64 {
    curve.decay(s_largest).max(0.0)
}

/// Root-mean-square error of `curve` against `entropies` at `sizes`.
pub fn rmse(curve: &DecayCurve, sizes: &[f64], entropies: &[f64]) -> f64 {
    let sse: f64 = sizes
        .iter()
        .zip(entropies)
        .map(|(s, e)| (e - eval_curve(curve, *s)).powi(2))
        .sum();
    (sse / sizes.len() as f64).sqrt()
}

/// Batch loss: RMSE pooled over every point of every profile.
pub fn batch_loss(curves: &[DecayCurve], profiles: &[EntropyProfile], family: &ModelFamilySpec) -> Result<f64> {
    if curves.len() != profiles.len() || curves.is_empty() {
        return Err(Error::Shape(format!(
            "{} curves for {} profiles",
            curves.len(),
            profiles.len()
        )));
    }
    let mut sse = 0.0;
    for (c, p) in curves.iter().zip(profiles) {
        p.validate(family.len())?;
        for (s, e) in family.sizes().iter().zip(&p.entropies) {
            sse += (e - eval_curve(c, *s)).powi(2);
        }
    }
    Ok((sse / (curves.len() * family.len()) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iterations: usize,
    pub loss_tolerance: f64,
    pub num_restarts: usize,
    pub rng_seed: u64,
    /// Upper bound on every curve parameter.
    pub parameter_bound: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            loss_tolerance: 1e-8,
            num_restarts: 8,
            rng_seed: 0,
            parameter_bound: 1e4,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Parameter("max_iterations must be >= 1".into()));
        }
        if !(self.loss_tolerance > 0.0) {
            return Err(Error::Parameter("loss_tolerance must be > 0".into()));
        }
        if self.num_restarts == 0 {
            return Err(Error::Parameter("num_restarts must be >= 1".into()));
        }
        if !(self.parameter_bound > 0.0) || !self.parameter_bound.is_finite() {
            return Err(Error::Parameter("parameter_bound must be finite and > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub curve: DecayCurve,
    /// RMSE of `curve` on the fitted points.
    pub loss: f64,
    /// Final RMSE of every restart, in restart order.
    pub restart_losses: Vec<f64>,
}

/// Lower clamp on log-parameters; exp(-40) is numerically zero here.
const MIN_LOG_PARAM: f64 = -40.0;
const MAX_DAMPING: f64 = 1e12;

/// Least-squares problem in the optimizer's coordinates. The asymptote is
/// searched as an offset `w` from the smallest observed entropy (projected
/// so that `z >= 0`); every other parameter is `exp(u)` clamped to the
/// bound. Working relative to the minimum makes the search equivariant to
/// shifting all entropies by a constant.
struct Problem<'a> {
    kind: CurveKind,
    sizes: &'a [f64],
    /// Entropies minus `offset`.
    centered: Vec<f64>,
    offset: f64,
    log_bound: f64,
}

impl Problem<'_> {
    fn curve(&self, v: &[f64]) -> DecayCurve {
        let mut p = Vec::with_capacity(v.len());
        p.push(self.offset + v[0]);
        p.extend(v[1..].iter().map(|u| u.exp()));
        DecayCurve::from_params(self.kind, &p)
    }

    fn project(&self, v: &mut [f64]) {
        let bound = self.log_bound.exp();
        v[0] = v[0].clamp(-self.offset, bound - self.offset);
        for u in &mut v[1..] {
            *u = u.clamp(MIN_LOG_PARAM, self.log_bound);
        }
    }

    /// Residuals in the centered frame: `(z - offset) + decay(s) - y'`.
    fn residuals(&self, v: &[f64]) -> DVector<f64> {
        let curve = self.curve(v);
        DVector::from_iterator(
            self.sizes.len(),
            self.sizes
                .iter()
                .zip(&self.centered)
                .map(|(s, y)| v[0] + curve.decay(*s) - y),
        )
    }

    fn jacobian(&self, v: &[f64]) -> DMatrix<f64> {
        let curve = self.curve(v);
        let p = v.len();
        let mut jac = DMatrix::zeros(self.sizes.len(), p);
        let mut grad = vec![0.0; p];
        for (i, s) in self.sizes.iter().enumerate() {
            curve.decay_with_grad(*s, &mut grad);
            jac[(i, 0)] = 1.0;
            for j in 1..p {
                // d theta / d u = theta, zero when pinned at a clamp.
                let pinned = v[j] <= MIN_LOG_PARAM || v[j] >= self.log_bound;
                jac[(i, j)] = if pinned { 0.0 } else { grad[j] * v[j].exp() };
            }
        }
        jac
    }

    fn loss(r: &DVector<f64>) -> f64 {
        (r.norm_squared() / r.len() as f64).sqrt()
    }
}

/// Levenberg-Marquardt with identity damping and box projection.
fn levenberg_marquardt(problem: &Problem<'_>, mut v: Vec<f64>, config: &FitConfig) -> (Vec<f64>, f64) {
    problem.project(&mut v);
    let mut r = problem.residuals(&v);
    let mut loss = Problem::loss(&r);
    let mut damping = 1e-3;
    let p = v.len();

    for _ in 0..config.max_iterations {
        if loss == 0.0 {
            break;
        }
        let jac = problem.jacobian(&v);
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let grad = &jt * &r;

        let mut accepted = None;
        while damping <= MAX_DAMPING {
            let mut lhs = jtj.clone();
            for j in 0..p {
                lhs[(j, j)] += damping;
            }
            let step = match lhs.cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    damping *= 10.0;
                    continue;
                }
            };
            let mut cand: Vec<f64> = v.iter().zip(step.iter()).map(|(a, d)| a + d).collect();
            problem.project(&mut cand);
            let cand_r = problem.residuals(&cand);
            let cand_loss = Problem::loss(&cand_r);
            if cand_loss.is_finite() && cand_loss < loss {
                accepted = Some((cand, cand_r, cand_loss));
                damping = (damping / 3.0).max(1e-12);
                break;
            }
            damping *= 4.0;
        }

        match accepted {
            Some((cand, cand_r, cand_loss)) => {
                let improvement = loss - cand_loss;
                v = cand;
                r = cand_r;
                loss = cand_loss;
                if improvement < config.loss_tolerance {
                    break;
                }
            }
            None => break,
        }
    }
    (v, loss)
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..=hi.ln())
}

/// Fits a decay curve to one profile.
///
/// Each restart draws a fresh starting point from an rng keyed by
/// `(config.rng_seed, context_id, position)`, so results do not depend on
/// the order or thread in which profiles are fitted.
pub fn fit_curve(
    profile: &EntropyProfile,
    family: &ModelFamilySpec,
    kind: CurveKind,
    k: usize,
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    profile.validate(family.len())?;
    if kind == CurveKind::FractionalPolynomial && k == 0 {
        return Err(Error::Parameter("fractional polynomial needs K >= 1".into()));
    }
    let y = &profile.entropies;
    let min = y.iter().copied().fold(f64::INFINITY, f64::min);
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let problem = Problem {
        kind,
        sizes: family.sizes(),
        centered: y.iter().map(|e| e - min).collect(),
        offset: min,
        log_bound: config.parameter_bound.ln(),
    };
    let n_params = DecayCurve::param_count(kind, k);
    let mut rng = keyed_rng(config.rng_seed, &profile.context_id, profile.position);

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut restart_losses = Vec::with_capacity(config.num_restarts);
    for _ in 0..config.num_restarts {
        let mut v = Vec::with_capacity(n_params);
        // Asymptote starts up to one observed range below the minimum.
        v.push(-rng.random_range(0.0..=1.0) * range);
        let b0: f64 = rng.random_range(0.0..=1.0) * range;
        v.push(b0.max(1e-6).ln());
        for _ in 2..n_params {
            v.push(log_uniform(&mut rng, 0.01, 10.0));
        }
        let (v, _) = levenberg_marquardt(&problem, v, config);
        let loss = rmse(&problem.curve(&v), family.sizes(), y);
        restart_losses.push(loss);
        if best.as_ref().is_none_or(|(_, l)| loss < *l) {
            best = Some((v, loss));
        }
    }
    let (v, loss) = best.expect("at least one restart");
    let curve = problem.curve(&v);
    debug_assert!(curve.validate().is_ok());
    Ok(FitResult {
        curve,
        loss,
        restart_losses,
    })
}

/// Fits every profile in parallel. Output order matches input order.
pub fn fit_profiles(
    profiles: &[EntropyProfile],
    family: &ModelFamilySpec,
    kind: CurveKind,
    k: usize,
    config: &FitConfig,
) -> Result<Vec<FitResult>> {
    profiles
        .par_iter()
        .map(|p| fit_curve(p, family, kind, k, config))
        .collect()
}

/// Centered moving average of entropies over neighbouring positions of the
/// same context. Edges use the truncated window. Surprisals are untouched.
pub fn smooth_profiles(profiles: &[EntropyProfile], window: usize) -> Result<Vec<EntropyProfile>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "smoothing window must be odd and >= 1, got {window}"
        )));
    }
    let mut out = profiles.to_vec();
    if window == 1 {
        return Ok(out);
    }
    let half = window / 2;
    let mut by_context: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in profiles.iter().enumerate() {
        by_context.entry(p.context_id.as_str()).or_default().push(i);
    }
    for idx in by_context.values_mut() {
        idx.sort_by_key(|&i| profiles[i].position);
        for (rank, &target) in idx.iter().enumerate() {
            let lo = rank.saturating_sub(half);
            let hi = (rank + half).min(idx.len() - 1);
            let n = profiles[target].entropies.len();
            let mut mean = vec![0.0; n];
            for &src in &idx[lo..=hi] {
                if profiles[src].entropies.len() != n {
                    return Err(Error::Shape(format!(
                        "context {} mixes profile lengths",
                        profiles[src].context_id
                    )));
                }
                for (m, e) in mean.iter_mut().zip(&profiles[src].entropies) {
                    *m += e;
                }
            }
            let count = (hi - lo + 1) as f64;
            out[target].entropies = mean.into_iter().map(|m| m / count).collect();
        }
    }
    Ok(out)
}

//! Synthetic ground truth.
//!
//! Two generators live here. A mixture family blends a random "ideal"
//! next-token distribution with uniform noise whose weight shrinks with
//! model size, so every context has an exactly known asymptotic entropy.
//! Separable cases build a composite distribution out of a factual head and
//! a hallucination tail split at a known mass `g`, which lets the
//! residual-entropy threshold bound be checked by brute force.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decay::{EntropyProfile, ModelFamilySpec};
use crate::detect::{Label, LabeledSpan};
use crate::dist::{entropy, entropy_of, normalize, sample, TokenDistribution};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Non-embedding parameter counts of a seven-member family (70M to 6.9B
/// class models).
pub const REFERENCE_PARAM_COUNTS: [f64; 7] = [
    18_915_328.0,
    85_056_000.0,
    302_311_424.0,
    805_736_448.0,
    1_208_602_624.0,
    2_517_652_480.0,
    6_444_163_072.0,
];

/// Natural-log sizes of [`REFERENCE_PARAM_COUNTS`].
pub fn reference_family() -> ModelFamilySpec {
    ModelFamilySpec::from_param_counts(&REFERENCE_PARAM_COUNTS).expect("reference sizes are valid")
}

/// A family whose member at log size `s` predicts
/// `lambda(s) * Uniform + (1 - lambda(s)) * ideal` with
/// `lambda(s) = clamp(exp(-mix_rate * (s - s_ref)), 0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureFamily {
    pub ideal: TokenDistribution,
    pub mix_rate: f64,
    pub s_ref: f64,
    pub sizes: ModelFamilySpec,
}

impl MixtureFamily {
    pub fn new(ideal: TokenDistribution, mix_rate: f64, s_ref: f64, sizes: ModelFamilySpec) -> Result<Self> {
        if !(mix_rate > 0.0) || !mix_rate.is_finite() {
            return Err(Error::Parameter(format!("mix_rate must be > 0, got {mix_rate}")));
        }
        if !s_ref.is_finite() {
            return Err(Error::Parameter("s_ref must be finite".into()));
        }
        Ok(Self {
            ideal,
            mix_rate,
            s_ref,
            sizes,
        })
    }

    /// Uniform-noise weight at log size `s`.
    pub fn lambda(&self, s: f64) -> f64 {
        (-self.mix_rate * (s - self.s_ref)).exp().clamp(0.0, 1.0)
    }

    pub fn mixture(&self, s: f64) -> TokenDistribution {
        let lam = self.lambda(s);
        let u = 1.0 / self.ideal.len() as f64;
        let w: Vec<f64> = self.ideal.probs().iter().map(|p| lam * u + (1.0 - lam) * p).collect();
        normalize(&w).expect("mixture of distributions has positive mass")
    }

    /// Entropy of the infinitely large member.
    pub fn true_asymptote(&self) -> f64 {
        entropy(&self.ideal)
    }

    /// Exact entropies at every family size.
    pub fn entropies(&self) -> Vec<f64> {
        self.sizes.sizes().iter().map(|s| family_entropy(self, *s)).collect()
    }
}

/// Entropy of the family member at log size `s`.
pub fn family_entropy(fam: &MixtureFamily, s: f64) -> f64 {
    entropy(&fam.mixture(s))
}

fn dirichlet_ones<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let w: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            return w.into_iter().map(|x: f64| x / total).collect();
        }
    }
}

/// Random ideal over `vocab` tokens: Dirichlet(1) on a random support whose
/// size is uniform in `1..=vocab`; remaining tokens get zero.
pub fn random_ideal<R: Rng + ?Sized>(rng: &mut R, vocab: usize) -> TokenDistribution {
    let support = rng.random_range(1..=vocab);
    let mut p = dirichlet_ones(rng, support);
    p.resize(vocab, 0.0);
    normalize(&p).expect("dirichlet draw has positive mass")
}

/// One synthetic profile with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleProfile {
    pub profile: EntropyProfile,
    pub true_asymptote: f64,
    /// Noise-free entropies at each size.
    pub clean_entropies: Vec<f64>,
}

/// Ground truth for one context, as stored next to generated records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub context_id: String,
    pub position: u64,
    pub true_asymptote: f64,
    pub clean_entropies: Vec<f64>,
}

impl From<&OracleProfile> for TruthRecord {
    fn from(o: &OracleProfile) -> Self {
        Self {
            context_id: o.profile.context_id.clone(),
            position: o.profile.position,
            true_asymptote: o.true_asymptote,
            clean_entropies: o.clean_entropies.clone(),
        }
    }
}

/// Draws `contexts` profiles. `template` supplies the vocabulary size (from
/// its ideal), the mixing schedule and the sizes; every context gets its
/// own random ideal. Entropies get Gaussian noise floored at zero.
pub fn generate_profiles(
    template: &MixtureFamily,
    contexts: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<Vec<OracleProfile>> {
    if contexts == 0 {
        return Err(Error::Parameter("need at least one context".into()));
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(Error::Parameter(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::Parameter(e.to_string()))?;
    let vocab = template.ideal.len();
    Ok((0..contexts)
        .into_par_iter()
        .map(|i| {
            let mut rng = keyed_rng(seed, "oracle-profile", i as u64);
            let fam = MixtureFamily {
                ideal: random_ideal(&mut rng, vocab),
                ..template.clone()
            };
            let clean = fam.entropies();
            let noisy = clean
                .iter()
                .map(|e| {
                    if noise_sd > 0.0 {
                        (e + noise.sample(&mut rng)).max(0.0)
                    } else {
                        *e
                    }
                })
                .collect();
            OracleProfile {
                profile: EntropyProfile::new(format!("ctx{i:05}"), 0, noisy),
                true_asymptote: fam.true_asymptote(),
                clean_entropies: clean,
            }
        })
        .collect())
}

/// A composite distribution `D_a = [g * D_f, (1 - g) * D_h]` whose factual
/// head dominates every hallucinated token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparableCase {
    pub g: f64,
    pub factual: TokenDistribution,
    pub hallucination: TokenDistribution,
    pub composite: TokenDistribution,
    /// `H(D_a) - H(D_f)`.
    pub d_re_exact: f64,
}

pub fn make_separable_case(
    g: f64,
    factual: TokenDistribution,
    hallucination: TokenDistribution,
) -> Result<SeparableCase> {
    if !(g > 0.0 && g <= 1.0) {
        return Err(Error::Parameter(format!("g must be in (0, 1], got {g}")));
    }
    let lhs = g * factual.min_prob();
    let rhs = (1.0 - g) * hallucination.max_prob();
    if lhs < rhs {
        return Err(Error::Separability { lhs, rhs });
    }
    let composite = if g == 1.0 {
        factual.clone()
    } else {
        let mut p: Vec<f64> = factual.probs().iter().map(|x| g * x).collect();
        p.extend(hallucination.probs().iter().map(|x| (1.0 - g) * x));
        TokenDistribution::new(p)?
    };
    let d_re_exact = entropy_of(composite.probs()) - entropy(&factual);
    Ok(SeparableCase {
        g,
        factual,
        hallucination,
        composite,
        d_re_exact,
    })
}

/// Rejection-samples a case: `g ~ U(0.3, 0.99)`, `D_f` Dirichlet(1) over
/// 1..=16 tokens, `D_h` Dirichlet(1) over 1..=64 tokens.
pub fn random_separable_case<R: Rng + ?Sized>(rng: &mut R) -> SeparableCase {
    loop {
        let g = rng.random_range(0.3..0.99);
        let nf = rng.random_range(1..=16);
        let nh = rng.random_range(1..=64);
        let f = TokenDistribution::new(dirichlet_ones(rng, nf));
        let h = TokenDistribution::new(dirichlet_ones(rng, nh));
        if let (Ok(f), Ok(h)) = (f, h) {
            if let Ok(case) = make_separable_case(g, f, h) {
                return case;
            }
        }
    }
}

/// `g^(1/T) - exp(-d_RE / T)`; non-negative whenever the case is separable.
pub fn check_theorem_bound(case: &SeparableCase, temperature: f64) -> f64 {
    case.g.powf(1.0 / temperature) - (-case.d_re_exact / temperature).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cases: usize,
    pub temperatures: Vec<f64>,
    pub checks: usize,
    pub violations: usize,
    pub min_margin: f64,
    /// Cases whose truncation at `g` did not give back `D_f`.
    pub recovery_failures: usize,
}

/// Margin below which a check counts as a violation.
pub const VIOLATION_TOLERANCE: f64 = -1e-9;

/// Generates `cases` random separable cases and checks the bound at every
/// temperature. Single-threaded and deterministic in `seed`.
pub fn theorem_sweep(cases: usize, temperatures: &[f64], seed: u64) -> Result<SweepReport> {
    if let Some(t) = temperatures.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {t}")));
    }
    let mut rng: ChaCha8Rng = keyed_rng(seed, "theorem-sweep", 0);
    let mut report = SweepReport {
        cases,
        temperatures: temperatures.to_vec(),
        checks: 0,
        violations: 0,
        min_margin: f64::INFINITY,
        recovery_failures: 0,
    };
    for _ in 0..cases {
        let case = random_separable_case(&mut rng);
        for &t in temperatures {
            let margin = check_theorem_bound(&case, t);
            report.checks += 1;
            report.min_margin = report.min_margin.min(margin);
            if margin < VIOLATION_TOLERANCE {
                report.violations += 1;
            }
        }
        if !recovers_factual(&case) {
            report.recovery_failures += 1;
        }
    }
    Ok(report)
}

/// Whether nucleus truncation of `D_a` at `g` gives back `D_f` to 1e-12.
pub fn recovers_factual(case: &SeparableCase) -> bool {
    let Ok(dec) = crate::dist::truncate_top_p(&case.composite, case.g) else {
        return false;
    };
    let nf = case.factual.len();
    dec.dist.probs()[..nf]
        .iter()
        .zip(case.factual.probs())
        .all(|(a, b)| (a - b).abs() <= 1e-12)
        && dec.dist.probs()[nf..].iter().all(|p| *p == 0.0)
}

/// Shape of a synthetic hallucination-detection suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSuiteConfig {
    pub spans: usize,
    pub tokens_per_span: usize,
    pub vocab: usize,
    /// Mixing decay rate for factual tokens (fast convergence).
    pub factual_mix_rate: f64,
    /// Mixing decay rate for nonfactual tokens (slow convergence, so the
    /// largest model sits well above the asymptote).
    pub nonfactual_mix_rate: f64,
    pub s_ref: f64,
    pub noise_sd: f64,
}

impl Default for DetectionSuiteConfig {
    fn default() -> Self {
        Self {
            spans: 200,
            tokens_per_span: 6,
            vocab: 64,
            factual_mix_rate: 1.5,
            nonfactual_mix_rate: 0.4,
            s_ref: 15.5,
            noise_sd: 0.0,
        }
    }
}

/// Labeled spans whose tokens come from mixture families. Every token has
/// its own random ideal, so the asymptote varies widely while the label only
/// controls how far the largest model still is from it. Surprisals are
/// computed for a realized token drawn from the largest model.
pub fn detection_suite(family: &ModelFamilySpec, cfg: &DetectionSuiteConfig, seed: u64) -> Result<Vec<LabeledSpan>> {
    if cfg.spans == 0 || cfg.tokens_per_span == 0 || cfg.vocab == 0 {
        return Err(Error::Parameter(
            "detection suite needs spans, tokens and vocabulary".into(),
        ));
    }
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::Parameter(e.to_string()))?;
    (0..cfg.spans)
        .map(|i| {
            let mut rng = keyed_rng(seed, "detection-span", i as u64);
            let label = if rng.random_bool(0.5) {
                Label::Nonfactual
            } else {
                Label::Factual
            };
            let rate = match label {
                Label::Factual => cfg.factual_mix_rate,
                Label::Nonfactual => cfg.nonfactual_mix_rate,
            };
            let context_id = format!("span{i:05}");
            let mut profiles = Vec::with_capacity(cfg.tokens_per_span);
            for pos in 0..cfg.tokens_per_span {
                let fam = MixtureFamily::new(random_ideal(&mut rng, cfg.vocab), rate, cfg.s_ref, family.clone())?;
                let largest = fam.mixture(family.largest());
                let token = sample(&largest, &mut rng);
                let mut ent = Vec::with_capacity(family.len());
                let mut surp = Vec::with_capacity(family.len());
                for &s in family.sizes() {
                    let m = fam.mixture(s);
                    let e = entropy(&m);
                    ent.push(if cfg.noise_sd > 0.0 {
                        (e + noise.sample(&mut rng)).max(0.0)
                    } else {
                        e
                    });
                    surp.push(-m.probs()[token].ln());
                }
                profiles.push(EntropyProfile::new(context_id.clone(), pos as u64, ent).with_surprisals(surp));
            }
            Ok(LabeledSpan {
                context_id,
                start: 0,
                end: cfg.tokens_per_span as u64,
                label,
                profiles,
            })
        })
        .collect()
}

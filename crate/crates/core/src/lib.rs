//! Entropy-decay extrapolation and residual-entropy driven decoding.
//!
//! A family of language models of increasing size gives, for every context,
//! a sequence of next-token entropies that shrinks as the model grows. This
//! crate fits a non-increasing decay curve through those points, reads off
//! the asymptote (the entropy an infinitely large model would have), and
//! turns the gap between the largest model and the asymptote (the residual
//! entropy) into a per-step nucleus threshold.
//!
//! Modules:
//!
//! - [`dist`]: distributions, entropy, top-p / top-k truncation, sampling.
//! - [`decay`]: decay curves, per-context least-squares fitting, smoothing.
//! - [`sampler`]: threshold rules and the single-step decoder.
//! - [`oracle`]: synthetic families with known asymptotes and the
//!   separable-distribution construction used to check the threshold bound.
//! - [`metrics`]: diversity, regression and max-min aggregation metrics.
//! - [`detect`]: span-level hallucination features and PR-AUC scoring.
//! - [`io`]: JSONL record, curve and trace formats.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decay;
pub mod detect;
pub mod dist;
pub mod error;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod sampler;

mod rng;

pub use decay::{
    asymptote, eval_curve, fit_curve, residual_entropy, smooth_profiles, CurveKind, DecayCurve, EntropyProfile,
    FitConfig, FitResult, ModelFamilySpec,
};
pub use detect::{extract_features, score_feature, DetectionFeatureVector, LabeledSpan};
pub use dist::{
    apply_temperature, entropy, normalize, sample, truncate_top_k, truncate_top_p, LogitVector, ThresholdDecision,
    TokenDistribution,
};
pub use error::{Error, Result};
pub use sampler::{decode_step, DecodeState, Method, SamplerConfig};

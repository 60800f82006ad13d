//! Span-level hallucination-detection features and their scoring.
//!
//! "Large" and "small" refer to the largest and smallest members of the
//! model family.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decay::{asymptote, residual_entropy, DecayCurve, EntropyProfile, ModelFamilySpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Factual,
    Nonfactual,
}

impl Label {
    pub fn is_nonfactual(self) -> bool {
        self == Label::Nonfactual
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Factual => "factual",
            Label::Nonfactual => "nonfactual",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "factual" | "0" | "false" => Ok(Label::Factual),
            "nonfactual" | "1" | "true" => Ok(Label::Nonfactual),
            other => Err(Error::Data(format!("unknown label `{other}`"))),
        }
    }
}

/// A labeled token range `[start, end)` together with its per-token profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSpan {
    pub context_id: String,
    pub start: u64,
    pub end: u64,
    pub label: Label,
    pub profiles: Vec<EntropyProfile>,
}

/// How per-token values are pooled over a span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    /// Only the earliest token of the span.
    FirstToken,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "first_token" | "first-token" => Ok(Aggregation::FirstToken),
            other => Err(Error::Parameter(format!("unknown aggregation `{other}`"))),
        }
    }
}

/// The eight unsupervised features. Perplexity features are `None` when the
/// span has no surprisals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFeatureVector {
    pub large_per: Option<f64>,
    pub large_ent: f64,
    pub small_per: Option<f64>,
    pub small_ent: f64,
    pub heur_per: Option<f64>,
    pub heur_ent: f64,
    /// Mean residual entropy.
    pub re: f64,
    /// Mean asymptotic entropy.
    pub ae: f64,
}

impl DetectionFeatureVector {
    pub const NAMES: [&'static str; 8] = [
        "large_per",
        "large_ent",
        "small_per",
        "small_ent",
        "heur_per",
        "heur_ent",
        "re",
        "ae",
    ];

    /// Values in [`Self::NAMES`] order.
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            self.large_per,
            Some(self.large_ent),
            self.small_per,
            Some(self.small_ent),
            self.heur_per,
            Some(self.heur_ent),
            Some(self.re),
            Some(self.ae),
        ]
    }

    pub fn get(&self, name: &str) -> Option<Option<f64>> {
        Self::NAMES.iter().position(|n| *n == name).map(|i| self.values()[i])
    }
}

/// `sqrt(large * max(0, small - large))`.
fn heuristic(large: f64, small: f64) -> f64 {
    (large * (small - large).max(0.0)).max(0.0).sqrt()
}

/// Computes span features. `curves[i]` belongs to `span.profiles[i]`.
pub fn extract_features(
    span: &LabeledSpan,
    curves: &[DecayCurve],
    family: &ModelFamilySpec,
    mode: Aggregation,
) -> Result<DetectionFeatureVector> {
    if span.profiles.is_empty() {
        return Err(Error::Data(format!("span {} has no tokens", span.context_id)));
    }
    if curves.len() != span.profiles.len() {
        return Err(Error::Shape(format!(
            "span {} has {} tokens but {} curves",
            span.context_id,
            span.profiles.len(),
            curves.len()
        )));
    }
    let n = family.len();
    for p in &span.profiles {
        p.validate(n)?;
    }
    let selected: Vec<usize> = match mode {
        Aggregation::Mean => (0..span.profiles.len()).collect(),
        Aggregation::FirstToken => {
            let first = (0..span.profiles.len())
                .min_by_key(|&i| span.profiles[i].position)
                .expect("non-empty");
            vec![first]
        }
    };
    let count = selected.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| selected.iter().map(|&i| f(i)).sum::<f64>() / count;

    let large_ent = mean(&|i| span.profiles[i].entropies[n - 1]);
    let small_ent = mean(&|i| span.profiles[i].entropies[0]);
    let re = mean(&|i| residual_entropy(&curves[i], family.largest()));
    let ae = mean(&|i| asymptote(&curves[i]));

    let has_surprisal = selected.iter().all(|&i| span.profiles[i].surprisals.is_some());
    let (large_per, small_per, heur_per) = if has_surprisal {
        let surp = |i: usize, k: usize| span.profiles[i].surprisals.as_ref().expect("checked")[k];
        let large = mean(&|i| surp(i, n - 1)).exp();
        let small = mean(&|i| surp(i, 0)).exp();
        (Some(large), Some(small), Some(heuristic(large, small)))
    } else {
        (None, None, None)
    };

    Ok(DetectionFeatureVector {
        large_per,
        large_ent,
        small_per,
        small_ent,
        heur_per,
        heur_ent: heuristic(large_ent, small_ent),
        re,
        ae,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    /// Area under the precision-recall curve with nonfactual as the positive
    /// class; `None` when only one class is present.
    pub auc: Option<f64>,
    /// Accuracy of the best single threshold.
    pub best_threshold_accuracy: f64,
}

/// Scores one feature column. `nonfactual[i]` is the label of row `i`.
///
/// The PR-AUC is average precision with tied scores treated as a single
/// threshold, so it only depends on the ranking of the values.
pub fn score_feature(values: &[f64], nonfactual: &[bool], higher_is_nonfactual: bool) -> Result<FeatureScore> {
    if values.len() != nonfactual.len() {
        return Err(Error::Shape(format!(
            "{} values for {} labels",
            values.len(),
            nonfactual.len()
        )));
    }
    if values.is_empty() {
        return Err(Error::UndefinedMetric("no rows to score".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("feature values must be finite".into()));
    }
    let oriented: Vec<f64> = values
        .iter()
        .map(|v| if higher_is_nonfactual { *v } else { -*v })
        .collect();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| oriented[b].total_cmp(&oriented[a]));

    let positives = nonfactual.iter().filter(|x| **x).count();
    let negatives = nonfactual.len() - positives;
    let total = nonfactual.len() as f64;

    // Sweep thresholds from high to low, one group of tied scores at a time.
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    // Predicting everything factual.
    let mut best_correct = negatives;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && oriented[order[j]] == oriented[order[i]] {
            if nonfactual[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        if positives > 0 {
            let recall = tp as f64 / positives as f64;
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        best_correct = best_correct.max(tp + (negatives - fp));
        i = j;
    }
    let auc = (positives > 0 && negatives > 0).then_some(ap);
    Ok(FeatureScore {
        auc,
        best_threshold_accuracy: best_correct as f64 / total,
    })
}

/// Groups of `group_size` consecutive rows each hold one factual candidate;
/// returns the fraction of groups where the least hazardous row is factual.
pub fn group_pick_accuracy(
    values: &[f64],
    nonfactual: &[bool],
    group_size: usize,
    higher_is_nonfactual: bool,
) -> Result<f64> {
    if group_size == 0
        || values.len() != nonfactual.len()
        || values.is_empty()
        || !values.len().is_multiple_of(group_size)
    {
        return Err(Error::Shape(format!(
            "{} rows cannot be split into groups of {group_size}",
            values.len()
        )));
    }
    let groups = values.len() / group_size;
    let mut hits = 0;
    for g in 0..groups {
        let rows = g * group_size..(g + 1) * group_size;
        let pick = rows
            .clone()
            .min_by(|&a, &b| {
                let (va, vb) = if higher_is_nonfactual {
                    (values[a], values[b])
                } else {
                    (-values[a], -values[b])
                };
                va.total_cmp(&vb)
            })
            .expect("non-empty group");
        if !nonfactual[pick] {
            hits += 1;
        }
    }
    Ok(hits as f64 / groups as f64)
}

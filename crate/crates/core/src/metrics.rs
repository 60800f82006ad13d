//! Diversity, regression and aggregation metrics.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generations of one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptGenerations {
    pub prompt_id: String,
    pub generations: Vec<Vec<u32>>,
}

/// Token sequences grouped by prompt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub prompts: Vec<PromptGenerations>,
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_id: String,
    pub tokens: Vec<u32>,
}

impl Corpus {
    /// Groups sequences by prompt id, keeping first-seen prompt order.
    pub fn from_records(records: impl IntoIterator<Item = GenerationRecord>) -> Result<Self> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut prompts: Vec<PromptGenerations> = Vec::new();
        for r in records {
            if r.tokens.is_empty() {
                return Err(Error::Data(format!("empty generation for prompt {}", r.prompt_id)));
            }
            let slot = *index.entry(r.prompt_id.clone()).or_insert_with(|| {
                prompts.push(PromptGenerations {
                    prompt_id: r.prompt_id.clone(),
                    generations: Vec::new(),
                });
                prompts.len() - 1
            });
            prompts[slot].generations.push(r.tokens);
        }
        Ok(Self { prompts })
    }

    pub fn generation_count(&self) -> usize {
        self.prompts.iter().map(|p| p.generations.len()).sum()
    }
}

/// Unique over total n-grams, pooled across the generations of each prompt
/// and then averaged over prompts. Prompts with no n-gram are skipped.
pub fn distinct_n(corpus: &Corpus, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Parameter("n must be >= 1".into()));
    }
    let mut ratios = Vec::new();
    for prompt in &corpus.prompts {
        let mut seen: HashSet<&[u32]> = HashSet::new();
        let mut total = 0usize;
        for g in prompt.generations.iter().filter(|g| g.len() >= n) {
            for w in g.windows(n) {
                seen.insert(w);
                total += 1;
            }
        }
        if total > 0 {
            ratios.push(seen.len() as f64 / total as f64);
        }
    }
    if ratios.is_empty() {
        return Err(Error::UndefinedMetric(format!("no generation has {n} or more tokens")));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Whether some n-gram occurs at least twice inside `seq`.
pub fn has_repeated_ngram(seq: &[u32], n: usize) -> bool {
    if seq.len() < n + 1 {
        return false;
    }
    let mut seen = HashSet::new();
    seq.windows(n).any(|w| !seen.insert(w))
}

/// Fraction of generations containing a repeated n-gram (default n = 4).
pub fn repetition_ratio(corpus: &Corpus, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Parameter("n must be >= 1".into()));
    }
    let total = corpus.generation_count();
    if total == 0 {
        return Ok(0.0);
    }
    let repeats = corpus
        .prompts
        .iter()
        .flat_map(|p| &p.generations)
        .filter(|g| has_repeated_ngram(g, n))
        .count();
    Ok(repeats as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    /// `None` when either vector has zero variance.
    pub pearson_r: Option<f64>,
    /// `None` when `actual` has zero variance.
    pub r2: Option<f64>,
    pub mse: f64,
    pub mean_l1: f64,
}

pub fn regression_report(predicted: &[f64], actual: &[f64]) -> Result<RegressionReport> {
    if predicted.len() != actual.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predicted.len(),
            actual.len()
        )));
    }
    if actual.is_empty() {
        return Err(Error::UndefinedMetric("regression over zero points".into()));
    }
    if predicted.iter().chain(actual).any(|v| !v.is_finite()) {
        return Err(Error::Data("regression inputs must be finite".into()));
    }
    let n = actual.len() as f64;
    let mean_p = predicted.iter().sum::<f64>() / n;
    let mean_a = actual.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy, mut sse, mut sae) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, a) in predicted.iter().zip(actual) {
        let (dp, da) = (p - mean_p, a - mean_a);
        sxy += dp * da;
        sxx += dp * dp;
        syy += da * da;
        sse += (p - a).powi(2);
        sae += (p - a).abs();
    }
    let pearson_r = (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0));
    let r2 = (syy > 0.0).then(|| 1.0 - sse / syy);
    Ok(RegressionReport {
        pearson_r,
        r2,
        mse: sse / n,
        mean_l1: sae / n,
    })
}

/// One raw score: `value` of `metric` for `method` on `model` and `prompt_type`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub method: String,
    pub model: String,
    pub prompt_type: String,
    pub metric: String,
    pub value: f64,
}

pub const ENTAIL_R: &str = "entail_r";
pub const NE_ER: &str = "ne_er";
pub const DIST_2: &str = "dist_2";
pub const REP: &str = "rep";

/// Lower-case, `-` to `_`: `Dist-2` becomes `dist_2`.
pub fn canonical_metric(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace('-', "_")
}

/// Normalized value given to every method when a group has no spread.
pub const TIE_VALUE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub model: String,
    /// `entail_r_n - ne_er_n`, when both are present.
    pub agg_factuality: Option<f64>,
    /// `dist_2_n - rep_n`, when both are present.
    pub agg_diversity: Option<f64>,
    /// Normalized metric values averaged over prompt types.
    pub normalized: BTreeMap<String, f64>,
}

/// Max-min normalizes each metric across methods within every
/// `(model, prompt_type)` group, averages over prompt types, then combines
/// the normalized columns into the factuality and diversity aggregates.
/// Rows are returned sorted by `(model, method)`.
pub fn minmax_aggregate(rows: &[ScoreRow]) -> Result<Vec<AggregateRow>> {
    let methods: HashSet<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    if methods.len() < 2 {
        return Err(Error::UndefinedMetric(
            "max-min normalization needs at least two methods".into(),
        ));
    }
    // (model, prompt_type, metric) -> method -> value
    let mut groups: BTreeMap<(&str, &str, String), BTreeMap<&str, f64>> = BTreeMap::new();
    for r in rows {
        if !r.value.is_finite() {
            return Err(Error::Data(format!("non-finite score for {}/{}", r.method, r.metric)));
        }
        let key = (r.model.as_str(), r.prompt_type.as_str(), canonical_metric(&r.metric));
        let slot = groups.entry(key).or_default();
        if slot.insert(r.method.as_str(), r.value).is_some() {
            return Err(Error::Data(format!(
                "duplicate score for method {} model {} prompt type {} metric {}",
                r.method, r.model, r.prompt_type, r.metric
            )));
        }
    }
    // (model, method, metric) -> normalized values over prompt types
    let mut pooled: BTreeMap<(&str, &str, String), Vec<f64>> = BTreeMap::new();
    for ((model, _prompt_type, metric), by_method) in &groups {
        let lo = by_method.values().copied().fold(f64::INFINITY, f64::min);
        let hi = by_method.values().copied().fold(f64::NEG_INFINITY, f64::max);
        for (method, v) in by_method {
            let n = if hi > lo { (v - lo) / (hi - lo) } else { TIE_VALUE };
            pooled.entry((model, method, metric.clone())).or_default().push(n);
        }
    }
    let mut out: BTreeMap<(&str, &str), BTreeMap<String, f64>> = BTreeMap::new();
    for ((model, method, metric), vals) in pooled {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        out.entry((model, method)).or_default().insert(metric, mean);
    }
    Ok(out
        .into_iter()
        .map(|((model, method), normalized)| {
            let pair = |a: &str, b: &str| Some(normalized.get(a)? - normalized.get(b)?);
            AggregateRow {
                method: method.to_string(),
                model: model.to_string(),
                agg_factuality: pair(ENTAIL_R, NE_ER),
                agg_diversity: pair(DIST_2, REP),
                normalized: normalized.clone(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn corpus(prompts: Vec<Vec<Vec<u32>>>) -> Corpus {
        Corpus {
            prompts: prompts
                .into_iter()
                .enumerate()
                .map(|(i, generations)| PromptGenerations {
                    prompt_id: format!("p{i}"),
                    generations,
                })
                .collect(),
        }
    }

    fn row(method: &str, metric: &str, value: f64) -> ScoreRow {
        ScoreRow {
            method: method.into(),
            model: "m".into(),
            prompt_type: "factual".into(),
            metric: metric.into(),
            value,
        }
    }

    #[test]
    fn distinct_examples() {
        let c = corpus(vec![vec![vec![0, 1, 0, 1]]]);
        assert_abs_diff_eq!(distinct_n(&c, 2).unwrap(), 2.0 / 3.0, epsilon = 1e-15);

        let g = vec![3, 4, 5, 3, 6];
        let c = corpus(vec![vec![g.clone(), g.clone(), g.clone(), g]]);
        assert_abs_diff_eq!(distinct_n(&c, 1).unwrap(), 4.0 / 20.0, epsilon = 1e-15);

        let c = corpus(vec![vec![vec![1, 2, 3], vec![4, 5, 6]], vec![vec![7, 8]]]);
        assert_eq!(distinct_n(&c, 2).unwrap(), 1.0);

        assert!(matches!(
            distinct_n(&corpus(vec![vec![vec![1]]]), 2),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(distinct_n(&c, 0).is_err());
    }

    #[test]
    fn repetition_examples() {
        let c = corpus(vec![vec![vec![1, 2, 3, 4, 5, 6, 7], vec![8, 9]]]);
        assert_eq!(repetition_ratio(&c, 4).unwrap(), 0.0);
        let rep = vec![1, 2, 3, 4, 1, 2, 3, 4];
        assert!(has_repeated_ngram(&rep, 4));
        let c = corpus(vec![vec![rep, vec![1, 2, 3, 4, 5], vec![5, 6, 7, 8], vec![9, 9, 9]]]);
        assert_abs_diff_eq!(repetition_ratio(&c, 4).unwrap(), 0.25, epsilon = 1e-15);
        // n = 1: any repeated token.
        assert_abs_diff_eq!(repetition_ratio(&c, 1).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn regression_examples() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let r = regression_report(&a, &a).unwrap();
        assert_eq!((r.pearson_r, r.r2, r.mse, r.mean_l1), (Some(1.0), Some(1.0), 0.0, 0.0));

        let a = [-1.0, 2.0, -3.0, 2.0];
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert_abs_diff_eq!(
            regression_report(&neg, &a).unwrap().pearson_r.unwrap(),
            -1.0,
            epsilon = 1e-15
        );

        let a = [1.0, 2.0, 6.0];
        let r = regression_report(&[3.0; 3], &a).unwrap();
        assert_abs_diff_eq!(r.r2.unwrap(), 0.0, epsilon = 1e-15);
        assert_eq!(r.pearson_r, None);

        let r = regression_report(&[1.0, 2.0], &[5.0, 5.0]).unwrap();
        assert_eq!((r.pearson_r, r.r2), (None, None));
        assert_abs_diff_eq!(r.mse, 12.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.mean_l1, 3.5, epsilon = 1e-15);
        assert!(regression_report(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn aggregate_tie_convention() {
        let rows = vec![
            row("a", "Dist-2", 0.2),
            row("b", "Dist-2", 0.4),
            row("a", "Rep", 0.1),
            row("b", "Rep", 0.1),
        ];
        let out = minmax_aggregate(&rows).unwrap();
        assert_eq!(out[0].method, "a");
        assert_eq!(out[0].agg_diversity, Some(-0.5));
        assert_eq!(out[1].agg_diversity, Some(0.5));
        assert_eq!(out[0].agg_factuality, None);

        let same = vec![
            row("a", "entail_r", 0.3),
            row("b", "entail_r", 0.3),
            row("a", "ne_er", 0.1),
            row("b", "ne_er", 0.1),
        ];
        assert!(minmax_aggregate(&same)
            .unwrap()
            .iter()
            .all(|r| r.agg_factuality == Some(0.0)));

        let best = vec![
            row("a", "entail_r", 0.9),
            row("b", "entail_r", 0.3),
            row("a", "ne_er", 0.1),
            row("b", "ne_er", 0.5),
        ];
        let out = minmax_aggregate(&best).unwrap();
        assert_eq!(out[0].agg_factuality, Some(1.0));
        assert_eq!(out[1].agg_factuality, Some(-1.0));
    }

    #[test]
    fn aggregate_normalizes_per_prompt_type_and_model() {
        let mut rows = vec![];
        for (pt, va, vb) in [("factual", 0.2, 0.4), ("nonfactual", 0.9, 0.1)] {
            for (m, v) in [("a", va), ("b", vb)] {
                rows.push(ScoreRow {
                    method: m.into(),
                    model: "x".into(),
                    prompt_type: pt.into(),
                    metric: "dist_2".into(),
                    value: v,
                });
                rows.push(ScoreRow {
                    method: m.into(),
                    model: "x".into(),
                    prompt_type: pt.into(),
                    metric: "rep".into(),
                    value: 0.0,
                });
            }
        }
        rows.push(ScoreRow {
            method: "a".into(),
            model: "y".into(),
            prompt_type: "factual".into(),
            metric: "dist_2".into(),
            value: 5.0,
        });
        rows.push(ScoreRow {
            method: "b".into(),
            model: "y".into(),
            prompt_type: "factual".into(),
            metric: "dist_2".into(),
            value: 1.0,
        });
        let out = minmax_aggregate(&rows).unwrap();
        let get = |m: &str, model: &str| out.iter().find(|r| r.method == m && r.model == model).unwrap();
        assert_eq!(get("a", "x").normalized["dist_2"], 0.5);
        assert_eq!(get("b", "x").normalized["dist_2"], 0.5);
        assert_eq!(get("a", "y").normalized["dist_2"], 1.0);
        assert_eq!(get("a", "y").agg_diversity, None);
    }

    #[test]
    fn aggregate_errors() {
        assert!(minmax_aggregate(&[row("a", "rep", 0.1)]).is_err());
        assert!(minmax_aggregate(&[row("a", "rep", 0.1), row("a", "rep", 0.2), row("b", "rep", 0.2)]).is_err());
    }

    proptest! {
        #[test]
        fn diversity_invariant_under_relabeling(
            gens in prop::collection::vec(prop::collection::vec(0u32..6, 1..20), 1..8),
            perm_seed in 0u32..1000,
        ) {
            let map = |t: u32| (t * 7 + perm_seed) % 6 + 100;
            let c = corpus(vec![gens.clone()]);
            let r = corpus(vec![gens.iter().map(|g| g.iter().map(|t| map(*t)).collect()).collect()]);
            for n in 1..4 {
                let a = distinct_n(&c, n).ok();
                let b = distinct_n(&r, n).ok();
                prop_assert_eq!(a, b);
                prop_assert_eq!(repetition_ratio(&c, n).unwrap(), repetition_ratio(&r, n).unwrap());
            }
        }

        #[test]
        fn aggregates_in_range_and_affine_invariant(
            vals in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 2..6),
            scale in 0.1f64..10.0, shift in -5.0f64..5.0,
        ) {
            let mut rows = vec![];
            let mut scaled = vec![];
            for (i, (e, n, d, r)) in vals.iter().enumerate() {
                let m = format!("m{i}");
                for (metric, v) in [(ENTAIL_R, e), (NE_ER, n), (DIST_2, d), (REP, r)] {
                    rows.push(row(&m, metric, *v));
                    let v2 = if metric == DIST_2 { v * scale + shift } else { *v };
                    scaled.push(row(&m, metric, v2));
                }
            }
            let a = minmax_aggregate(&rows).unwrap();
            let b = minmax_aggregate(&scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                let (f, dv) = (x.agg_factuality.unwrap(), x.agg_diversity.unwrap());
                prop_assert!((-1.0..=1.0).contains(&f) && (-1.0..=1.0).contains(&dv));
                prop_assert!((dv - y.agg_diversity.unwrap()).abs() < 1e-9);
            }
        }
    }
}

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use realsamp_core::decay::fit_profiles;
use realsamp_core::detect::{group_pick_accuracy, Aggregation, FeatureScore, Label};
use realsamp_core::io::{
    read_curves, read_jsonl, read_records, read_scores, write_atomic, write_feature_table, write_jsonl, write_records,
    CurveRecord, FeatureRow, LogitFrame, RecordHeader, SpanLabel,
};
use realsamp_core::metrics::{
    distinct_n, minmax_aggregate, regression_report, repetition_ratio, Corpus, GenerationRecord,
};
use realsamp_core::oracle::{
    detection_suite, generate_profiles, reference_family, theorem_sweep, DetectionSuiteConfig, MixtureFamily,
    TruthRecord,
};
use realsamp_core::sampler::TraceRecord;
use realsamp_core::{
    asymptote, decode_step, eval_curve, extract_features, score_feature, smooth_profiles, DecayCurve, DecodeState,
    DetectionFeatureVector, EntropyProfile, Error, FitConfig, LabeledSpan, LogitVector, Method, ModelFamilySpec,
    SamplerConfig, TokenDistribution,
};

use crate::args::*;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => fit(a),
        Command::Decode(a) => decode(a),
        Command::Oracle(OracleCommand::Generate(a)) => oracle_generate(a),
        Command::Oracle(OracleCommand::Score(a)) => oracle_score(a),
        Command::Oracle(OracleCommand::Theorem(a)) => oracle_theorem(a),
        Command::Oracle(OracleCommand::Detection(a)) => oracle_detection(a),
        Command::Metrics(MetricsCommand::Diversity(a)) => metrics_diversity(a),
        Command::Metrics(MetricsCommand::Regression(a)) => metrics_regression(a),
        Command::Metrics(MetricsCommand::Aggregate(a)) => metrics_aggregate(a),
        Command::Detect(a) => detect(a),
    }
}

/// Pretty JSON to `out`, or to stdout.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => write_atomic(path, |w| {
            w.write_all(text.as_bytes())?;
            w.write_all(b"\n")?;
            Ok(())
        })?,
        None => print_line(&text)?,
    }
    Ok(())
}

/// Writes to stdout; a closed pipe is not an error.
fn print_line(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => bail!(Error::Parameter("--threads must be >= 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            Ok(pool.install(f))
        }
    }
}

fn curve_map(records: &[CurveRecord]) -> Result<HashMap<(String, u64), DecayCurve>> {
    let mut map = HashMap::with_capacity(records.len());
    for r in records {
        if map.insert(r.key(), r.curve()?).is_some() {
            bail!(Error::Data(format!(
                "duplicate curve for {}:{}",
                r.context_id, r.position
            )));
        }
    }
    Ok(map)
}

fn lookup<'a, T>(map: &'a HashMap<(String, u64), T>, id: &str, pos: u64, what: &str) -> Result<&'a T> {
    map.get(&(id.to_string(), pos))
        .ok_or_else(|| Error::Data(format!("no {what} for {id}:{pos}")).into())
}

fn fit(a: FitArgs) -> Result<()> {
    let config = FitConfig {
        max_iterations: a.max_iter,
        loss_tolerance: a.tol,
        num_restarts: a.restarts,
        rng_seed: a.seed,
        ..FitConfig::default()
    };
    config.validate()?;
    let (header, profiles) = read_records(&a.records)?;
    if profiles.is_empty() {
        bail!(Error::Data(format!("{} contains no profiles", a.records.display())));
    }
    let mut profiles = smooth_profiles(&profiles, a.window)?;
    profiles.sort_by(|x, y| (&x.context_id, x.position).cmp(&(&y.context_id, y.position)));
    let fits = with_threads(a.threads, || {
        fit_profiles(&profiles, &header.family, a.kind.into(), a.k, &config)
    })??;
    let records: Vec<CurveRecord> = profiles
        .iter()
        .zip(&fits)
        .map(|(p, f)| CurveRecord::new(p, f))
        .collect();
    write_jsonl(&a.out, &records)?;

    #[derive(Serialize)]
    struct Summary {
        curves: usize,
        mean_loss: f64,
        max_loss: f64,
    }
    let losses: Vec<f64> = fits.iter().map(|f| f.loss).collect();
    emit(
        &Summary {
            curves: records.len(),
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            max_loss: losses.iter().copied().fold(0.0, f64::max),
        },
        None,
    )
}

fn sampler_config(a: &DecodeArgs) -> Result<SamplerConfig> {
    let method: Method = a.method.parse()?;
    let mut config = SamplerConfig::new(method);
    config.top_p = a.p;
    config.top_k = a.k;
    config.real_temperature = a.real_t;
    config.tau = a.tau;
    config.eta = a.eta;
    config.typical_mass = a.typical_mass;
    if let Some(alpha) = a.alpha {
        config.cd_alpha = alpha;
    }
    config.sentence_terminals = a.terminals.iter().copied().collect();
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct TokenRecord {
    step: u64,
    token: usize,
}

fn decode(a: DecodeArgs) -> Result<()> {
    let config = sampler_config(&a)?;
    let method = config.method;
    let family = match &a.records {
        Some(path) => Some(read_records(path)?.0.family),
        None => None,
    };
    let curves = match &a.curves {
        Some(path) => read_curves(path)?,
        None => Vec::new(),
    };
    if method.needs_curve() {
        if a.curves.is_none() {
            bail!(Error::Config(format!("method {method} requires --curves")));
        }
        if family.is_none() {
            bail!(Error::Config(format!(
                "method {method} requires --records for the model family"
            )));
        }
    }
    let frames: Vec<LogitFrame> = read_jsonl(&a.logits)?;
    let by_key = curve_map(&curves)?;

    // Resolve every input before sampling so that bad data writes nothing.
    let mut steps = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let expert = LogitVector::new(f.expert.clone()).with_context(|| format!("frame {}", i + 1))?;
        let amateur = match &f.amateur {
            Some(v) => {
                if v.len() != expert.len() {
                    bail!(Error::Shape(format!(
                        "frame {}: amateur and expert lengths differ",
                        i + 1
                    )));
                }
                Some(LogitVector::new(v.clone()).with_context(|| format!("frame {}", i + 1))?)
            }
            None if method.needs_amateur() => {
                bail!(Error::Data(format!(
                    "frame {}: method {method} needs amateur logits",
                    i + 1
                )))
            }
            None => None,
        };
        let curve = if method.needs_curve() {
            Some(match (&f.context_id, f.position) {
                (Some(id), Some(pos)) => lookup(&by_key, id, pos, "curve")?.clone(),
                _ => curves
                    .get(i)
                    .ok_or_else(|| Error::Data(format!("frame {}: no curve at that line", i + 1)))?
                    .curve()?,
            })
        } else {
            None
        };
        steps.push((expert, amateur, curve));
    }

    let mut state = DecodeState::new(a.seed);
    let mut tokens = Vec::with_capacity(steps.len());
    let mut trace = Vec::with_capacity(steps.len());
    for (i, (expert, amateur, curve)) in steps.iter().enumerate() {
        let outcome = decode_step(
            &config,
            expert,
            amateur.as_ref(),
            curve.as_ref(),
            family.as_ref(),
            &mut state,
        )
        .with_context(|| format!("frame {}", i + 1))?;
        tokens.push(TokenRecord {
            step: i as u64,
            token: outcome.token,
        });
        trace.push(TraceRecord::new(i as u64, &outcome));
    }
    write_jsonl(&a.out, &tokens)?;
    if let Some(path) = &a.trace {
        write_jsonl(path, &trace)?;
    }
    Ok(())
}

fn oracle_template(vocab: usize, mix_rate: f64, s_ref: f64) -> Result<MixtureFamily> {
    let ideal = TokenDistribution::uniform(vocab)?;
    Ok(MixtureFamily::new(ideal, mix_rate, s_ref, reference_family())?)
}

fn oracle_generate(a: GenerateArgs) -> Result<()> {
    let template = oracle_template(a.vocab, a.mix_rate, a.s_ref)?;
    let generated = generate_profiles(&template, a.contexts, a.noise, a.seed)?;
    let mut header = RecordHeader::new(template.sizes.clone());
    header.corpus_name = Some("mixture-oracle".into());
    let profiles: Vec<EntropyProfile> = generated.iter().map(|o| o.profile.clone()).collect();
    let truth: Vec<TruthRecord> = generated.iter().map(TruthRecord::from).collect();
    write_records(&a.out, &header, &profiles)?;
    write_jsonl(&a.truth, &truth)?;
    Ok(())
}

#[derive(Serialize)]
struct ContextScore {
    context_id: String,
    position: u64,
    fitted_asymptote: f64,
    true_asymptote: f64,
    asymptote_error: f64,
    predicted_final: f64,
    true_final: f64,
}

#[derive(Serialize)]
struct ScoreReport {
    contexts: usize,
    asymptote_within_0_1: f64,
    final_within_0_02: f64,
    mean_abs_asymptote_error: f64,
    per_context: Vec<ContextScore>,
}

fn oracle_score(a: ScoreArgs) -> Result<()> {
    let family = read_records(&a.records)?.0.family;
    let curves = curve_map(&read_curves(&a.curves)?)?;
    let mut truth: Vec<TruthRecord> = read_jsonl(&a.truth)?;
    if truth.is_empty() {
        bail!(Error::Data("truth file is empty".into()));
    }
    truth.sort_by(|x, y| (&x.context_id, x.position).cmp(&(&y.context_id, y.position)));
    let mut per_context = Vec::with_capacity(truth.len());
    for t in &truth {
        let curve = lookup(&curves, &t.context_id, t.position, "curve")?;
        let true_final = *t
            .clean_entropies
            .last()
            .ok_or_else(|| Error::Data(format!("truth {} has no entropies", t.context_id)))?;
        let fitted = asymptote(curve);
        per_context.push(ContextScore {
            context_id: t.context_id.clone(),
            position: t.position,
            fitted_asymptote: fitted,
            true_asymptote: t.true_asymptote,
            asymptote_error: (fitted - t.true_asymptote).abs(),
            predicted_final: eval_curve(curve, family.largest()),
            true_final,
        });
    }
    let n = per_context.len() as f64;
    let frac = |f: &dyn Fn(&ContextScore) -> bool| per_context.iter().filter(|c| f(c)).count() as f64 / n;
    let report = ScoreReport {
        contexts: per_context.len(),
        asymptote_within_0_1: frac(&|c| c.asymptote_error <= 0.1),
        final_within_0_02: frac(&|c| (c.predicted_final - c.true_final).abs() <= 0.02),
        mean_abs_asymptote_error: per_context.iter().map(|c| c.asymptote_error).sum::<f64>() / n,
        per_context,
    };
    emit(&report, a.out.as_deref())
}

fn oracle_theorem(a: TheoremArgs) -> Result<()> {
    let report = theorem_sweep(a.cases, &a.temps, a.seed)?;
    print_line(&format!(
        "{} cases x {} temperatures: {} checks, {} violations, min margin {:.6e}, {} recovery failures",
        report.cases,
        report.temperatures.len(),
        report.checks,
        report.violations,
        report.min_margin,
        report.recovery_failures
    ))?;
    if report.violations > 0 || report.recovery_failures > 0 {
        bail!(Error::Data("threshold bound violated".into()));
    }
    Ok(())
}

fn oracle_detection(a: DetectionArgs) -> Result<()> {
    let family = reference_family();
    let cfg = DetectionSuiteConfig {
        spans: a.spans,
        tokens_per_span: a.tokens_per_span,
        ..DetectionSuiteConfig::default()
    };
    let spans = detection_suite(&family, &cfg, a.seed)?;
    let mut header = RecordHeader::new(family);
    header.corpus_name = Some("detection-oracle".into());
    let profiles: Vec<EntropyProfile> = spans.iter().flat_map(|s| s.profiles.iter().cloned()).collect();
    let labels: Vec<SpanLabel> = spans
        .iter()
        .map(|s| SpanLabel {
            context_id: s.context_id.clone(),
            start: s.start,
            end: s.end,
            label: s.label,
        })
        .collect();
    write_records(&a.records, &header, &profiles)?;
    write_jsonl(&a.labels, &labels)?;
    Ok(())
}

fn metrics_diversity(a: DiversityArgs) -> Result<()> {
    let records: Vec<GenerationRecord> = read_jsonl(&a.corpus)?;
    let corpus = Corpus::from_records(records)?;

    #[derive(Serialize)]
    struct Report {
        prompts: usize,
        generations: usize,
        n: usize,
        dist_n: f64,
        rep_n: usize,
        rep: f64,
    }
    emit(
        &Report {
            prompts: corpus.prompts.len(),
            generations: corpus.generation_count(),
            n: a.n,
            dist_n: distinct_n(&corpus, a.n)?,
            rep_n: a.rep_n,
            rep: repetition_ratio(&corpus, a.rep_n)?,
        },
        None,
    )
}

fn metrics_regression(a: RegressionArgs) -> Result<()> {
    let (header, profiles) = read_records(&a.records)?;
    let curves = curve_map(&read_curves(&a.curves)?)?;
    let s_n = header.family.largest();
    let mut predicted = Vec::with_capacity(profiles.len());
    let mut actual = Vec::with_capacity(profiles.len());
    for p in &profiles {
        let curve = lookup(&curves, &p.context_id, p.position, "curve")?;
        predicted.push(eval_curve(curve, s_n));
        actual.push(*p.entropies.last().expect("validated"));
    }
    emit(&regression_report(&predicted, &actual)?, None)
}

fn metrics_aggregate(a: AggregateArgs) -> Result<()> {
    let rows = read_scores(&a.scores)?;
    emit(&minmax_aggregate(&rows)?, a.out.as_deref())
}

fn build_spans(
    profiles: Vec<EntropyProfile>,
    curves: &HashMap<(String, u64), DecayCurve>,
    labels: &[SpanLabel],
) -> Result<Vec<(LabeledSpan, Vec<DecayCurve>)>> {
    let by_key: HashMap<(String, u64), EntropyProfile> = profiles
        .into_iter()
        .map(|p| ((p.context_id.clone(), p.position), p))
        .collect();
    labels
        .iter()
        .map(|l| {
            if l.end <= l.start {
                bail!(Error::Data(format!("span {} has end <= start", l.context_id)));
            }
            let mut span_profiles = Vec::new();
            let mut span_curves = Vec::new();
            for pos in l.start..l.end {
                span_profiles.push(lookup(&by_key, &l.context_id, pos, "profile")?.clone());
                span_curves.push(lookup(curves, &l.context_id, pos, "curve")?.clone());
            }
            let span = LabeledSpan {
                context_id: l.context_id.clone(),
                start: l.start,
                end: l.end,
                label: l.label,
                profiles: span_profiles,
            };
            Ok((span, span_curves))
        })
        .collect()
}

fn detect(a: DetectArgs) -> Result<()> {
    let (header, profiles) = read_records(&a.records)?;
    let curves = curve_map(&read_curves(&a.curves)?)?;
    let labels: Vec<SpanLabel> = read_jsonl(&a.labels)?;
    if labels.is_empty() {
        bail!(Error::Data("label file is empty".into()));
    }
    let mode = match a.mode {
        ModeArg::Mean => Aggregation::Mean,
        ModeArg::FirstToken => Aggregation::FirstToken,
    };
    let family: &ModelFamilySpec = &header.family;
    let spans = build_spans(profiles, &curves, &labels)?;
    let rows = spans
        .iter()
        .map(|(span, c)| {
            Ok(FeatureRow {
                context_id: span.context_id.clone(),
                label: span.label,
                features: extract_features(span, c, family, mode)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let nonfactual: Vec<bool> = rows.iter().map(|r| r.label == Label::Nonfactual).collect();
    let mut scores: BTreeMap<&str, FeatureScore> = BTreeMap::new();
    let mut picks: BTreeMap<&str, f64> = BTreeMap::new();
    for (j, name) in DetectionFeatureVector::NAMES.iter().enumerate() {
        let column: Option<Vec<f64>> = rows.iter().map(|r| r.features.values()[j]).collect();
        let Some(column) = column else { continue };
        scores.insert(name, score_feature(&column, &nonfactual, true)?);
        if let Some(g) = a.group_size {
            picks.insert(name, group_pick_accuracy(&column, &nonfactual, g, true)?);
        }
    }
    write_feature_table(&a.out, &rows)?;

    #[derive(Serialize)]
    struct Report<'a> {
        spans: usize,
        nonfactual: usize,
        features: BTreeMap<&'a str, FeatureScore>,
        #[serde(skip_serializing_if = "BTreeMap::is_empty")]
        group_pick_accuracy: BTreeMap<&'a str, f64>,
    }
    emit(
        &Report {
            spans: rows.len(),
            nonfactual: nonfactual.iter().filter(|x| **x).count(),
            features: scores,
            group_pick_accuracy: picks,
        },
        None,
    )
}

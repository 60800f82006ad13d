use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use realsamp_core::oracle::{generate_profiles, reference_family, MixtureFamily};
use realsamp_core::{
    decode_step, fit_curve, truncate_top_k, truncate_top_p, CurveKind, DecayCurve, DecodeState, FitConfig, LogitVector,
    Method, SamplerConfig, TokenDistribution,
};

fn logits(vocab: usize) -> LogitVector {
    LogitVector::new(
        (0..vocab)
            .map(|i| (i as f64 * 0.618).sin() * 4.0 - (i as f64).ln_1p())
            .collect(),
    )
    .unwrap()
}

fn bench_fit(c: &mut Criterion) {
    let family = reference_family();
    let template = MixtureFamily::new(TokenDistribution::uniform(64).unwrap(), 0.6, 15.0, family.clone()).unwrap();
    let profile = generate_profiles(&template, 1, 0.0, 1).unwrap().remove(0).profile;
    let config = FitConfig::default();
    let mut group = c.benchmark_group("fit_curve");
    for (name, kind, k) in [
        ("fp_k10", CurveKind::FractionalPolynomial, 10),
        ("exponential", CurveKind::Exponential, 0),
        ("logistic", CurveKind::Logistic, 0),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| fit_curve(black_box(&profile), &family, kind, k, &config).unwrap())
        });
    }
    group.finish();
}

fn bench_truncation(c: &mut Criterion) {
    let mut group = c.benchmark_group("truncation");
    for vocab in [1_000, 50_000] {
        let dist = logits(vocab).softmax();
        group.bench_with_input(BenchmarkId::new("top_p_0.9", vocab), &dist, |b, d| {
            b.iter(|| truncate_top_p(black_box(d), 0.9).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("top_k_40", vocab), &dist, |b, d| {
            b.iter(|| truncate_top_k(black_box(d), 40.0).unwrap())
        });
    }
    group.finish();
}

fn bench_decode(c: &mut Criterion) {
    let family = reference_family();
    let curve = DecayCurve::new(CurveKind::Exponential, 1.0, 2.0, 0.5, 17.0, 0.0, vec![]).unwrap();
    let expert = logits(50_000);
    let amateur = LogitVector::new(expert.values().iter().map(|v| v * 0.7).collect()).unwrap();
    let mut group = c.benchmark_group("decode_step");
    for method in [Method::TopP, Method::Real, Method::RealCd] {
        let config = match method {
            Method::TopP => SamplerConfig::top_p(0.9),
            m => SamplerConfig::real(m, 1.0),
        };
        let amateur = method.needs_amateur().then_some(&amateur);
        let mut state = DecodeState::new(0);
        group.bench_function(method.as_str(), |b| {
            b.iter(|| {
                decode_step(
                    &config,
                    black_box(&expert),
                    amateur,
                    Some(&curve),
                    Some(&family),
                    &mut state,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_fit, bench_truncation, bench_decode);
criterion_main!(benches);

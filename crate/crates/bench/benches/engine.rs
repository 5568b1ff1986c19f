use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use stylebank_bench::Fixture;
use stylebank_core::distill::{distill, DistillOptions};
use stylebank_core::kmeans::{kmeans, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use stylebank_core::model::attention;
use stylebank_core::pipeline::{stylize_full_concat, stylize, StyleInputs, StylizeConfig};
use stylebank_core::{synth, FeatureMatrix};

fn points(rows: usize, cols: usize, seed: u32) -> FeatureMatrix {
    FeatureMatrix::from_fn(rows, cols, |r, c| {
        let x = (r as u32).wrapping_mul(2654435761) ^ (c as u32).wrapping_mul(40503) ^ seed;
        (x % 1000) as f32 / 500.0 - 1.0
    })
}

fn bench_attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention");
    for n in [64usize, 256, 1024] {
        let q = points(64, 8, 1);
        let k = points(n, 8, 2);
        let v = points(n, 8, 3);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| attention(black_box(&q), black_box(&k), black_box(&v), 0.35).unwrap())
        });
    }
    g.finish();
}

fn bench_kmeans(c: &mut Criterion) {
    let mut g = c.benchmark_group("kmeans");
    for (n, k) in [(256usize, 64usize), (1024, 256)] {
        let p = points(n, 8, 4);
        g.bench_with_input(BenchmarkId::new("points", format!("{n}x{k}")), &k, |b, &k| {
            b.iter(|| kmeans(black_box(&p), k, 0, DEFAULT_MAX_ITERS, DEFAULT_TOL).unwrap())
        });
    }
    g.finish();
}

fn bench_distill(c: &mut Criterion) {
    let fx = Fixture::new(3, 32, 4);
    let readers = fx.readers();
    c.bench_function("distill/3x32px/4steps", |b| {
        b.iter(|| distill(black_box(&readers), &DistillOptions::default()).unwrap())
    });
}

fn bench_stylize(c: &mut Criterion) {
    let fx = Fixture::new(5, 32, 4);
    let readers = fx.readers();
    let bank = distill(&readers, &DistillOptions::default()).unwrap();
    let content = synth::content_image(0, 32, 32);
    let cfg = StylizeConfig {
        steps: 4,
        ..Default::default()
    };
    let mut g = c.benchmark_group("stylize/5 styles");
    g.sample_size(20);
    g.bench_function("bank", |b| {
        b.iter(|| {
            stylize(&fx.model, &content, StyleInputs { source: &bank, norm: &fx.norm }, &fx.phi, &cfg).unwrap()
        })
    });
    g.bench_function("full concatenation", |b| {
        b.iter(|| stylize_full_concat(&fx.model, &content, &readers, &fx.norm, &fx.phi, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench_attention, bench_kmeans, bench_distill, bench_stylize);
criterion_main!(benches);

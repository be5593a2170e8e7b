// SPDX-License-Identifier: MIT OR Apache-2.0

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tfdecomp_bench::{corpus, fixture};
use tfdecomp_core::analysis::importance_profile;
use tfdecomp_core::{decompose_closed, decompose_recurrence};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for d in [16, 64] {
        let (model, seq) = fixture(4, d, 4, 32);
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            b.iter(|| model.forward(black_box(&seq), None).unwrap())
        });
    }
    group.finish();
}

fn decompose(c: &mut Criterion) {
    let mut group = c.benchmark_group("decompose");
    for d in [16, 64] {
        let (model, seq) = fixture(4, d, 4, 32);
        let (_, trace) = model.forward(&seq, None).unwrap();
        let cut = model.config.sublayers();
        group.bench_with_input(BenchmarkId::new("closed", d), &d, |b, _| {
            b.iter(|| decompose_closed(&model, black_box(&trace), cut).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("recurrence", d), &d, |b, _| {
            b.iter(|| decompose_recurrence(&model, black_box(&trace), cut).unwrap())
        });
    }
    group.finish();
}

fn profile(c: &mut Criterion) {
    let (model, _) = fixture(2, 32, 4, 16);
    let corpus = corpus(model.config.vocab, 32, 3);
    c.bench_function("importance_profile/32x(8..16)", |b| {
        b.iter(|| importance_profile(&model, black_box(&corpus)).unwrap())
    });
}

criterion_group!(benches, forward, decompose, profile);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use protolens::objectives::{loss_and_gradient, total_loss};
use protolens_bench::fixture;

fn forward(c: &mut Criterion) {
    let (model, batch, _) = fixture();
    c.bench_function("forward_one_instance", |b| {
        b.iter(|| model.forward_encoded(black_box(&batch[0].encoded)).unwrap())
    });
}

fn loss(c: &mut Criterion) {
    let (model, batch, cfg) = fixture();
    let mut group = c.benchmark_group("batch_16");
    group.bench_function("total_loss", |b| {
        b.iter(|| total_loss(black_box(&batch), &model, &cfg.loss).unwrap())
    });
    group.bench_function("loss_and_gradient", |b| {
        b.iter(|| loss_and_gradient(black_box(&batch), &model, &cfg.loss).unwrap())
    });
    group.finish();
}

criterion_group!(benches, forward, loss);
criterion_main!(benches);

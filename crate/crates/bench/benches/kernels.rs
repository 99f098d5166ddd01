use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use mcdal_bench::{gaussian_matrix, model, moons_workload};
use mcdal_core::acquisition::mcdal_scores;
use mcdal_core::trainer::train;
use mcdal_core::{DistanceKind, McdalOptions, Rng, TrainConfig};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 128, 256] {
        let a = gaussian_matrix(n, n, 1);
        let b = gaussian_matrix(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let m = model(2, 3);
    let x = gaussian_matrix(128, 2, 4);
    let y: Vec<usize> = (0..128).map(|i| i % 2).collect();
    c.bench_function("forward/128", |b| b.iter(|| black_box(m.forward(&x).unwrap())));
    let rec = m.forward(&x).unwrap();
    c.bench_function("backward_ce_all/128", |b| {
        b.iter(|| black_box(m.backward_ce_all(&rec, &x, &y).unwrap()))
    });
    c.bench_function("backward_dis_l1/128", |b| {
        b.iter(|| black_box(m.backward_dis(&rec, DistanceKind::L1).unwrap()))
    });
}

fn scoring(c: &mut Criterion) {
    let w = moons_workload(2000, 5);
    let m = model(2, 6);
    let opts = McdalOptions::default();
    c.bench_function("mcdal_scores/1800", |b| {
        b.iter(|| black_box(mcdal_scores(&m, &w.unlabeled, &w.unlabeled_indices, 0.1, &opts).unwrap()))
    });
}

fn training_epoch(c: &mut Criterion) {
    let w = moons_workload(2000, 7);
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let rng = Rng::new(8);
    c.bench_function("train_epoch/200_labeled", |b| {
        b.iter_batched(
            || model(2, 9),
            |mut m| black_box(train(&mut m, &w.labeled, &w.unlabeled, &cfg, &rng).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, matmul, forward_backward, scoring, training_epoch);
criterion_main!(benches);

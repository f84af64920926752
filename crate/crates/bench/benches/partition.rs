//! Dirichlet partitioning cost across the concentration grid.
//!
//! alpha=0.01 exercises the worst case: every redraw attempt fails the
//! minimum-shard-size rule, so the deterministic repair path runs too.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use fedlab_core::data::{dirichlet_partition, mean_label_entropy, PartitionSpec};

fn bench_partition(c: &mut Criterion) {
    // CIFAR-10-scale label set: 60k samples over 10 classes.
    let labels: Vec<u8> = (0..60_000).map(|i| (i % 10) as u8).collect();
    let mut group = c.benchmark_group("dirichlet");
    group.sample_size(10);
    for alpha in [1.0, 0.1, 0.01] {
        let spec = PartitionSpec {
            k: 20,
            alpha,
            seed: 7,
            train_fraction: 0.8,
            subsample_fraction: 1.0,
        };
        group.bench_with_input(BenchmarkId::new("k20", alpha), &spec, |b, spec| {
            b.iter(|| dirichlet_partition(black_box(&labels), 10, spec).unwrap())
        });
    }
    group.finish();

    let spec = PartitionSpec {
        k: 20,
        alpha: 0.1,
        seed: 7,
        train_fraction: 0.8,
        subsample_fraction: 1.0,
    };
    let p = dirichlet_partition(&labels, 10, &spec).unwrap();
    c.bench_function("mean_label_entropy/k20", |b| {
        b.iter(|| mean_label_entropy(black_box(&p)))
    });
}

criterion_group!(benches, bench_partition);
criterion_main!(benches);

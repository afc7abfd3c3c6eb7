use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hcot_core::objectives::{self, EntropyOptions, LogitBatch};
use hcot_core::LabelHierarchy;
use ndarray::Array2;
use rand::Rng;

fn random_batch(rows: usize, classes: usize) -> (Array2<f64>, Vec<usize>) {
    let mut rng = hcot_core::seed::rng(7);
    let z = Array2::from_shape_simple_fn((rows, classes), || rng.random_range(-3.0..3.0));
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    (z, labels)
}

fn bench_objectives(c: &mut Criterion) {
    let h = LabelHierarchy::cifar100();
    let opts = EntropyOptions::default();
    let mut group = c.benchmark_group("objectives_k100");
    for rows in [32usize, 128] {
        let (z, labels) = random_batch(rows, 100);
        let batch = LogitBatch::new(z.view(), &labels).unwrap();
        group.bench_with_input(
            BenchmarkId::new("cross_entropy", rows),
            &batch,
            |b, batch| b.iter(|| objectives::cross_entropy(batch).unwrap()),
        );
        group.bench_with_input(
            BenchmarkId::new("complement_entropy", rows),
            &batch,
            |b, batch| b.iter(|| objectives::complement_entropy(batch, opts).unwrap()),
        );
        group.bench_with_input(BenchmarkId::new("hce", rows), &batch, |b, batch| {
            b.iter(|| objectives::hierarchical_complement_entropy(batch, &h, opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_objectives);
criterion_main!(benches);

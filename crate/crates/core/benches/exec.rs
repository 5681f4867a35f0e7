//! Sequential vs data-parallel execution of the two hot paths: batched
//! evaluation and PGD over a test set.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tempscale_core::attack::{robust_accuracy, AttackConfig};
use tempscale_core::data::{gen_blobs_split, BlobSpec, Dataset};
use tempscale_core::model::{EncoderSpec, Model};
use tempscale_core::train::evaluate;
use tempscale_core::Exec;

fn setup() -> (Model, Dataset) {
    let (_, test) = gen_blobs_split(&BlobSpec {
        classes: 10,
        shape: vec![64],
        per_class: 10,
        test_per_class: 100,
        separation: 0.5,
        noise: 0.12,
        seed: 0,
    })
    .expect("reference-sized blobs");
    (
        Model::init(EncoderSpec::default_mlp(64), 10, 0).expect("valid spec"),
        test,
    )
}

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_evaluate(c: &mut Criterion) {
    let (model, test) = setup();
    let mut group = c.benchmark_group("evaluate");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&model, &test, exec))
        });
    }
    group.finish();
}

fn bench_pgd(c: &mut Criterion) {
    let (model, test) = setup();
    let test = test.take(300);
    let cfg = AttackConfig::pgd20(8.0 / 255.0, 0);
    let mut group = c.benchmark_group("pgd20");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| robust_accuracy(&model, &test, &cfg, exec))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_evaluate, bench_pgd);
criterion_main!(benches);

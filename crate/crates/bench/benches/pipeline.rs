use std::hint::black_box;

use avgzsl_bench::{fixture, small_dims};
use avgzsl_core::data::{sample_pairs, FeatureDims};
use avgzsl_core::eval::{eval_classification, gzsl_retrieval_eval, ModalityCondition};
use avgzsl_core::losses::{total_loss, total_loss_and_grad, LossConfig};
use avgzsl_core::train::{train_from, TrainConfig};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss");
    for (name, dims) in [("small", small_dims()), ("full", FeatureDims::default())] {
        let (data, params) = fixture(dims, 20, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_pairs(&data.splits.train, &data.manifest, 64, &mut rng).unwrap();
        let cfg = LossConfig::default();
        g.bench_function(format!("forward/{name}"), |b| {
            b.iter(|| total_loss(black_box(&batch), &params, &cfg).unwrap())
        });
        g.bench_function(format!("forward_backward/{name}"), |b| {
            b.iter(|| total_loss_and_grad(black_box(&batch), &params, &cfg).unwrap())
        });
    }
    g.finish();
}

fn eval(c: &mut Criterion) {
    let (data, params) = fixture(FeatureDims::default(), 50, 3);
    let mut g = c.benchmark_group("eval");
    g.bench_function("classify/both", |b| {
        b.iter(|| eval_classification(&params, &data.manifest, black_box(&data.splits.test), ModalityCondition::Both).unwrap())
    });
    g.bench_function("retrieve/both", |b| {
        b.iter(|| gzsl_retrieval_eval(&params, &data.manifest, black_box(&data.splits.test), ModalityCondition::Both).unwrap())
    });
    g.finish();
}

fn epoch(c: &mut Criterion) {
    let (data, params) = fixture(small_dims(), 20, 4);
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("epoch/small", |b| {
        b.iter_batched(|| params.clone(), |p| train_from(&data, p, &cfg).unwrap(), BatchSize::LargeInput)
    });
    g.finish();
}

criterion_group!(benches, loss, eval, epoch);
criterion_main!(benches);

use std::hint::black_box;

use clustr_core::model::{Model, ModelConfig};
use clustr_core::train::{DataConfig, TrainConfig, Trainer};
use clustr_core::Tensor;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn restore(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let x = Tensor::uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    g.bench_function("restore 1x3x64x64", |b| {
        b.iter(|| model.restore(black_box(&x)).unwrap())
    });
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let config = TrainConfig {
        batch: 2,
        data: DataConfig {
            train_sources: 4,
            ..DataConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(config.clone(), config.data.train_set(0).unwrap()).unwrap();
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("step batch 2 at 64x64", |b| b.iter(|| t.train_step().unwrap()));
    g.finish();
}

criterion_group!(benches, restore, train_step);
criterion_main!(benches);

use std::hint::black_box;

use clustr_core::autograd::Graph;
use clustr_core::metrics::ms_ssim;
use clustr_core::routing::cluster_posterior_from_sims;
use clustr_core::wavelet::{amp_phase, dwt2, idwt2};
use clustr_core::Tensor;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn transforms(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::uniform(&[8, 16, 64, 64], 0.0, 1.0, &mut rng);
    c.bench_function("dwt2 8x16x64x64", |b| b.iter(|| dwt2(black_box(&x)).unwrap()));
    let s = dwt2(&x).unwrap();
    c.bench_function("idwt2 8x16x64x64", |b| b.iter(|| idwt2(black_box(&s)).unwrap()));
    let ll = Tensor::uniform(&[8, 16, 32, 32], 0.0, 1.0, &mut rng);
    c.bench_function("amp_phase 8x16x32x32", |b| {
        b.iter(|| amp_phase(black_box(&ll)).unwrap())
    });
}

fn routing(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sims = Tensor::uniform(&[64, 6], -1.0, 1.0, &mut rng);
    c.bench_function("cluster posterior 64x6 k=2", |b| {
        b.iter(|| {
            let g = Graph::inference();
            let p = cluster_posterior_from_sims(g.constant(sims.clone()), 2).unwrap();
            black_box(p.weights.value());
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::uniform(&[8, 3, 64, 64], 0.0, 1.0, &mut rng);
    let b2 = Tensor::uniform(&[8, 3, 64, 64], 0.0, 1.0, &mut rng);
    c.bench_function("ms_ssim 8x3x64x64", |b| {
        b.iter(|| ms_ssim(black_box(&a), black_box(&b2)).unwrap())
    });
}

criterion_group!(benches, transforms, routing, metrics);
criterion_main!(benches);

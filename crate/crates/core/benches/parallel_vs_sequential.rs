use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mfpinet::nn::{Conv2d, ConvShape};
use mfpinet::{par, Generator, GeneratorConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn input(c: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(c, h, w, |c, y, x| {
        ((c * 13 + y * 7 + x * 3) % 23) as f32 / 11.5 - 1.0
    })
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = Conv2d::<f32>::new(ConvShape::new(64, 64, 3, 1), &mut rng);
    let x = input(64, 96, 96);
    let mut group = c.benchmark_group("conv3x3_64x64_96px");
    for (name, seq) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_sequential(seq);
            b.iter(|| black_box(layer.forward(&x).unwrap()));
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn generator_forward(c: &mut Criterion) {
    let gen = Generator::<f32>::new(GeneratorConfig::default(), 0).unwrap();
    let x = input(3, 64, 64);
    let mut group = c.benchmark_group("generator_forward_64px");
    group.sample_size(10);
    for (name, seq) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_sequential(seq);
            b.iter(|| black_box(gen.forward(&x).unwrap()));
        });
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, conv, generator_forward);
criterion_main!(benches);

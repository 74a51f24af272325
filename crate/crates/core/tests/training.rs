mod common;

use std::fs;

use mfpinet::discriminator::{Discriminator, DiscriminatorConfig};
use mfpinet::generator::{Generator, GeneratorConfig};
use mfpinet::nn::Parameters;
use mfpinet::stack_io;
use mfpinet::training::{
    self, discriminator_batch_loss, discriminator_loss, fit, generator_batch_loss, generator_loss,
    l1_mean, lr_at, read_run_log, train_step, Pair, TrainConfig, TrainState,
};
use mfpinet::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_gen() -> GeneratorConfig {
    GeneratorConfig {
        base_channels: 4,
        bottleneck_channels: 8,
        n_planes: 2,
        sr_head_channels: 16,
        ..Default::default()
    }
}

fn tiny_disc() -> DiscriminatorConfig {
    DiscriminatorConfig {
        in_channels: 6,
        widths: vec![4, 4, 8, 8],
        strides: vec![1, 2, 1, 2],
        leaky_slope: 0.2,
    }
}

fn pairs(n: usize, seed: u64) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = Tensor::from_fn(3, 16, 16, |_, _, _| rng.gen_range(-1.0f32..1.0));
            let y = Tensor::from_fn(6, 32, 32, |_, _, _| rng.gen_range(-0.9f32..0.9));
            (x, y)
        })
        .collect()
}

fn state(cfg: TrainConfig) -> TrainState {
    TrainState::new(tiny_gen(), tiny_disc(), cfg).unwrap()
}

#[test]
fn losses_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let n = rng.gen_range(1..=3);
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let dr: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
        let df: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
        let g: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let t: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let gt: Vec<Tensor<f64>> = g
            .iter()
            .map(|v| Tensor::from_vec(1, h, w, v.clone()).unwrap())
            .collect();
        let tt: Vec<Tensor<f64>> = t
            .iter()
            .map(|v| Tensor::from_vec(1, h, w, v.clone()).unwrap())
            .collect();
        let (lg, ld) = common::brute_force_losses(&dr, &df, &g, &t, 0.01);
        let got_g = generator_loss(&df, &gt, &tt, 0.01, 1e-8).unwrap();
        let got_d = discriminator_loss(&dr, &df, 1e-8).unwrap();
        assert!(((got_g - lg) / lg).abs() < 1e-9);
        assert!(((got_d - ld) / ld).abs() < 1e-9);
    }
}

#[test]
fn schedule_is_non_increasing_and_piecewise_constant() {
    let cfg = TrainConfig::default();
    for e in 1..cfg.epochs {
        let (a, b) = (lr_at(e - 1, &cfg).unwrap(), lr_at(e, &cfg).unwrap());
        assert!(b <= a);
        if e % 2 == 1 {
            assert_eq!(a, b);
        } else {
            assert_eq!(b, a / 2.0);
        }
    }
}

#[test]
fn step_changes_discriminator_and_reports_pure_losses() {
    let mut s = state(TrainConfig::default());
    let batch = pairs(2, 1);
    let frozen = s.clone();
    let losses = train_step(&mut s, &batch).unwrap();
    assert_ne!(s.discriminator, frozen.discriminator);
    assert_ne!(s.generator, frozen.generator);
    // L_D is evaluated before the discriminator update.
    let ld =
        discriminator_batch_loss(&frozen.generator, &frozen.discriminator, &batch, 1e-8).unwrap();
    assert!(
        (ld - losses.discriminator).abs() < 1e-6 * ld.abs().max(1.0),
        "{ld} {}",
        losses.discriminator
    );
    // L_G is evaluated with the updated discriminator, pre generator update.
    let mut mid = frozen.clone();
    mid.discriminator = s.discriminator.clone();
    let lg = generator_batch_loss(&mid.generator, &mid.discriminator, &batch, 0.01, 1e-8).unwrap();
    assert!(
        (lg - losses.generator).abs() < 1e-6 * lg.abs().max(1.0),
        "{lg} {}",
        losses.generator
    );
}

#[test]
fn discriminator_is_untouched_without_gradient() {
    // A zero learning rate is rejected by validation, so freeze the
    // discriminator loss instead: a zero head with probabilities at the clamp
    // boundary yields no gradient.
    let mut s = state(TrainConfig::default());
    s.discriminator
        .head
        .weight
        .value
        .iter_mut()
        .for_each(|v| *v = 0.0);
    s.discriminator.head.bias.value[0] = 40.0;
    let before = s.discriminator.clone();
    train_step(&mut s, &pairs(2, 2)).unwrap();
    assert_eq!(s.discriminator, before);
}

#[test]
fn small_step_reduces_l1_without_adversary() {
    let cfg = TrainConfig {
        alpha: 0.0,
        ..Default::default()
    };
    let mut s = state(cfg);
    let batch = pairs(2, 3);
    let l1 = |s: &TrainState| {
        batch
            .iter()
            .map(|(x, y)| l1_mean(&s.generator.forward(x).unwrap(), y).unwrap())
            .sum::<f64>()
    };
    let before = l1(&s);
    train_step(&mut s, &batch).unwrap();
    assert!(l1(&s) < before);
}

#[test]
fn non_finite_input_aborts_with_diagnostic() {
    let mut s = state(TrainConfig::default());
    let mut batch = pairs(1, 4);
    batch[0].1.data_mut()[0] = f32::NAN;
    match train_step(&mut s, &batch) {
        Err(Error::Numeric(m)) => assert!(m.contains("step 0"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn one_epoch_on_eight_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let out = fit(&pairs(8, 5), state(cfg), dir.path()).unwrap();
    assert_eq!(out.step, 2);
    assert_eq!(out.epoch, 1);
    let ckpts: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.unwrap().file_name().into_string().ok())
        .filter(|n| n.starts_with("ckpt_epoch"))
        .collect();
    assert_eq!(ckpts, vec!["ckpt_epoch1".to_string()]);
    let log = read_run_log(&dir.path().join(training::RUN_LOG)).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!((log[0].epoch, log[0].lr, log[0].steps), (0, 1e-4, 2));
    let line = fs::read_to_string(dir.path().join(training::RUN_LOG)).unwrap();
    for key in ["\"epoch\"", "\"lr\"", "\"loss_g\"", "\"loss_d\""] {
        assert!(line.contains(key));
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    let data = pairs(4, 6);
    let full_dir = tempfile::tempdir().unwrap();
    let full = fit(&data, state(cfg.clone()), full_dir.path()).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let first = fit(
        &data,
        state(TrainConfig {
            epochs: 1,
            ..cfg.clone()
        }),
        part_dir.path(),
    )
    .unwrap();
    assert_eq!(first.epoch, 1);
    let ckpt = training::latest_checkpoint(part_dir.path())
        .unwrap()
        .unwrap();
    assert!(ckpt.ends_with("ckpt_epoch1"));
    let mut resumed = stack_io::load_checkpoint(&ckpt, None).unwrap();
    resumed.config.epochs = 3;
    let done = fit(&data, resumed, part_dir.path()).unwrap();
    assert_eq!(done.epoch, full.epoch);
    assert_eq!(done.step, full.step);
    assert_eq!(done.generator, full.generator);
    assert_eq!(
        fs::read(full_dir.path().join(training::RUN_LOG)).unwrap(),
        fs::read(part_dir.path().join(training::RUN_LOG)).unwrap()
    );
}

#[test]
fn full_objective_gradient_through_discriminator() {
    let mut g = Generator::<f64>::new(tiny_gen(), 21).unwrap();
    let mut d = Discriminator::<f64>::new(tiny_disc(), 22).unwrap();
    let batch: Vec<(Tensor<f64>, Tensor<f64>)> = pairs(2, 23)
        .iter()
        .map(|(x, y)| (x.cast(), y.cast()))
        .collect();
    let alpha = 0.5;
    let loss = |g: &Generator<f64>, d: &Discriminator<f64>| {
        let outs: Vec<Tensor<f64>> = batch.iter().map(|(x, _)| g.forward(x).unwrap()).collect();
        let p: Vec<f64> = outs.iter().map(|o| d.probability(o).unwrap()).collect();
        let gts: Vec<Tensor<f64>> = batch.iter().map(|(_, y)| y.clone()).collect();
        generator_loss(&p, &outs, &gts, alpha, 1e-8).unwrap()
    };
    let fakes: Vec<_> = batch
        .iter()
        .map(|(x, _)| g.forward_train(x).unwrap())
        .collect();
    let targets: Vec<&Tensor<f64>> = batch.iter().map(|(_, y)| y).collect();
    g.zero_grad();
    d.zero_grad();
    let l = training::generator_objective_backward(&mut g, &mut d, &fakes, &targets, alpha, 1e-8)
        .unwrap();
    assert!((l - loss(&g, &d)).abs() < 1e-12);
    // The frozen discriminator accumulates nothing.
    d.visit("", &mut |_, p| assert!(p.grad.iter().all(|&v| v == 0.0)));
    let r = common::check(&mut g, 2, 24, |g| loss(g, &d));
    assert!(r.checked >= 100, "{}", r.checked);
    assert!(r.worst < 1e-3, "{}", r.worst);
}

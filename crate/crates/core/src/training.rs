//! Adversarial training: losses, learning-rate schedule, Adam, and the
//! epoch loop with per-epoch checkpoints and an NDJSON run log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{ensure_shape, Error, Result};
use crate::generator::{Generator, GeneratorConfig, GeneratorTape};
use crate::nn::{sigmoid, Param, Parameters};
use crate::stack_io::{self, DiskDataset};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the adversarial term in the generator loss.
    pub alpha: f64,
    pub lr0: f64,
    pub epochs: usize,
    pub lr_halving_period: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Probabilities are clamped into `[eps_guard, 1 - eps_guard]` before logs.
    pub eps_guard: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.01,
            lr0: 1e-4,
            epochs: 20,
            lr_halving_period: 2,
            batch_size: 4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eps_guard: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("training: {m}")));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!(
                "alpha must be a finite non-negative number, got {}",
                self.alpha
            ));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.lr_halving_period == 0 || self.batch_size == 0 {
            return bad("lr_halving_period and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps_guard > 0.0 && self.eps_guard < 0.5) || !(self.adam_eps > 0.0) {
            return bad("eps_guard must lie in (0, 0.5) and adam_eps must be positive".into());
        }
        Ok(())
    }
}

/// `lr0 * 0.5^floor(epoch / period)`, without range checking.
pub fn scheduled_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (epoch / cfg.lr_halving_period) as i32;
    cfg.lr0 * 0.5f64.powi(halvings)
}

/// Learning rate used during (zero-based) `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.epochs
        )));
    }
    Ok(scheduled_lr(epoch, cfg))
}

/// Validate a probability and clamp it into `[eps, 1 - eps]`.
pub fn guard_probability(p: f64, eps: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Numeric(format!("probability {p} outside [0, 1]")));
    }
    Ok(p.clamp(eps, 1.0 - eps))
}

fn is_clamped(p: f64, eps: f64) -> bool {
    p < eps || p > 1.0 - eps
}

/// Mean absolute difference over every element.
pub fn l1_mean<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ensure_shape!(a.same_shape(b), "l1 {:?} vs {:?}", a.shape(), b.shape());
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(s / a.len().max(1) as f64)
}

/// `(1/N) * sum_n [ alpha * -log D(G(x_n)) + mean|G(x_n) - y_n| ]`
pub fn generator_loss<T: Scalar>(
    d_fake: &[f64],
    g_out: &[Tensor<T>],
    gt: &[Tensor<T>],
    alpha: f64,
    eps: f64,
) -> Result<f64> {
    let n = d_fake.len();
    ensure_shape!(
        n > 0 && g_out.len() == n && gt.len() == n,
        "batch sizes differ: {} probabilities, {} outputs, {} targets",
        n,
        g_out.len(),
        gt.len()
    );
    let mut total = 0.0;
    for i in 0..n {
        let p = guard_probability(d_fake[i], eps)?;
        total += alpha * -p.ln() + l1_mean(&g_out[i], &gt[i])?;
    }
    Ok(total / n as f64)
}

/// `-(1/N) * sum_n [ log D(y_n) + log(1 - D(G(x_n))) ]`
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64], eps: f64) -> Result<f64> {
    ensure_shape!(
        !d_real.is_empty() && d_real.len() == d_fake.len(),
        "batch sizes differ: {} real, {} fake",
        d_real.len(),
        d_fake.len()
    );
    let mut total = 0.0;
    for (&r, &f) in d_real.iter().zip(d_fake) {
        let r = guard_probability(r, eps)?;
        let f = guard_probability(f, eps)?;
        total += r.ln() + (1.0 - f).ln();
    }
    Ok(-total / d_real.len() as f64)
}

/// `d L1 / d g_out` for one sample, scaled by `1 / batch`.
pub fn l1_grad<T: Scalar>(g_out: &Tensor<T>, gt: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
    ensure_shape!(
        g_out.same_shape(gt),
        "l1 {:?} vs {:?}",
        g_out.shape(),
        gt.shape()
    );
    let scale = T::of(1.0 / (batch as f64 * g_out.len() as f64));
    let mut g = g_out.clone();
    for (v, &t) in g.data_mut().iter_mut().zip(gt.data()) {
        let d = *v - t;
        *v = if d > T::zero() {
            scale
        } else if d < T::zero() {
            -scale
        } else {
            T::zero()
        };
    }
    Ok(g)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments, one buffer per parameter in visit order.
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &impl Parameters<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let mut m = Vec::new();
        net.visit("", &mut |_, p| m.push(vec![T::zero(); p.len()]));
        let v = m.clone();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m,
            v,
        }
    }

    pub fn update(&mut self, net: &mut impl Parameters<T>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        net.visit_mut("", &mut |_, p: &mut Param<T>| {
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + ob1 * g;
                v[i] = b2 * v[i] + ob2 * g * g;
                p.value[i] -= step_size * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(
        gen_cfg: GeneratorConfig,
        disc_cfg: DiscriminatorConfig,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if disc_cfg.in_channels != gen_cfg.output_channels() {
            return Err(Error::Config(format!(
                "discriminator takes {} channels but the generator emits {}",
                disc_cfg.in_channels,
                gen_cfg.output_channels()
            )));
        }
        let generator = Generator::new(gen_cfg, derive_seed(config.seed, 1))?;
        let discriminator = Discriminator::new(disc_cfg, derive_seed(config.seed, 2))?;
        Ok(Self::from_parts(config, generator, discriminator))
    }

    pub(crate) fn from_parts(
        config: TrainConfig,
        generator: Generator<f32>,
        discriminator: Discriminator<f32>,
    ) -> Self {
        let (b1, b2, e) = (config.adam_beta1, config.adam_beta2, config.adam_eps);
        TrainState {
            opt_g: Adam::new(&generator, b1, b2, e),
            opt_d: Adam::new(&discriminator, b1, b2, e),
            config,
            generator,
            discriminator,
            epoch: 0,
            step: 0,
        }
    }

    /// Learning rate at the current schedule position.
    pub fn current_lr(&self) -> f64 {
        scheduled_lr(self.epoch, &self.config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub generator: f64,
    pub discriminator: f64,
}

/// One (LR input, folded HR stack) training pair.
pub type Pair = (Tensor<f32>, Tensor<f32>);

fn check_batch(batch: &[Pair]) -> Result<()> {
    ensure_shape!(!batch.is_empty(), "empty batch");
    Ok(())
}

/// Discriminator loss of the current networks on `batch`, without updating.
pub fn discriminator_batch_loss(
    gen: &Generator<f32>,
    disc: &Discriminator<f32>,
    batch: &[Pair],
    eps: f64,
) -> Result<f64> {
    check_batch(batch)?;
    let mut real = Vec::with_capacity(batch.len());
    let mut fake = Vec::with_capacity(batch.len());
    for (lr, gt) in batch {
        real.push(disc.probability(gt)?);
        fake.push(disc.probability(&gen.forward(lr)?)?);
    }
    discriminator_loss(&real, &fake, eps)
}

/// Generator loss of the current networks on `batch`, without updating.
pub fn generator_batch_loss(
    gen: &Generator<f32>,
    disc: &Discriminator<f32>,
    batch: &[Pair],
    alpha: f64,
    eps: f64,
) -> Result<f64> {
    check_batch(batch)?;
    let mut p = Vec::new();
    let mut outs = Vec::new();
    let mut gts = Vec::new();
    for (lr, gt) in batch {
        let y = gen.forward(lr)?;
        p.push(disc.probability(&y)?);
        outs.push(y);
        gts.push(gt.clone());
    }
    generator_loss(&p, &outs, &gts, alpha, eps)
}

/// Backpropagate the generator loss through `disc` (frozen) into `gen`,
/// accumulating generator gradients. `fakes` are the outputs recorded in
/// `tapes`. Returns the loss.
pub fn generator_objective_backward<T: Scalar>(
    gen: &mut Generator<T>,
    disc: &mut Discriminator<T>,
    fakes: &[(Tensor<T>, GeneratorTape<T>)],
    targets: &[&Tensor<T>],
    alpha: f64,
    eps: f64,
) -> Result<f64> {
    let n = fakes.len();
    ensure_shape!(
        n > 0 && targets.len() == n,
        "generator objective on mismatched batch"
    );
    let mut probs = Vec::with_capacity(n);
    for ((fake, tape), gt) in fakes.iter().zip(targets) {
        let (z, dtape) = disc.logit_train(fake)?;
        let p = sigmoid(z.as_f64());
        let pg = guard_probability(p, eps)?;
        probs.push(p);
        let g_logit = if is_clamped(p, eps) || alpha == 0.0 {
            0.0
        } else {
            -alpha * (1.0 - pg) / n as f64
        };
        let mut g = l1_grad(fake, gt, n)?;
        if g_logit != 0.0 {
            let gin = disc
                .backward(&dtape, T::of(g_logit), true, false)?
                .expect("input grad requested");
            g.add_assign(&gin)?;
        }
        gen.backward(tape, &g)?;
    }
    let outs: Vec<Tensor<T>> = fakes.iter().map(|(f, _)| f.clone()).collect();
    let gts: Vec<Tensor<T>> = targets.iter().map(|&t| t.clone()).collect();
    generator_loss(&probs, &outs, &gts, alpha, eps)
}

/// One discriminator update on (real, detached fake) followed by one
/// generator update.
pub fn train_step(state: &mut TrainState, batch: &[Pair]) -> Result<StepLosses> {
    let step = state.step;
    step_inner(state, batch).map_err(|e| match e {
        Error::Numeric(m) if !m.contains(" at step ") => {
            Error::Numeric(format!("{m} at step {step}"))
        }
        e => e,
    })
}

fn step_inner(state: &mut TrainState, batch: &[Pair]) -> Result<StepLosses> {
    check_batch(batch)?;
    let cfg = state.config.clone();
    let lr = lr_at(state.epoch, &cfg)?;
    let n = batch.len();
    let eps = cfg.eps_guard;

    let fakes = batch
        .iter()
        .map(|(x, _)| state.generator.forward_train(x))
        .collect::<Result<Vec<_>>>()?;

    let disc = &mut state.discriminator;
    disc.zero_grad();
    let mut real_p = Vec::with_capacity(n);
    let mut fake_p = Vec::with_capacity(n);
    for ((_, gt), (fake, _)) in batch.iter().zip(&fakes) {
        let (z, tape) = disc.logit_train(gt)?;
        let p = sigmoid(z.as_f64());
        let pg = guard_probability(p, eps)?;
        if !is_clamped(p, eps) {
            disc.backward(&tape, -(1.0 - pg) as f32 / n as f32, false, true)?;
        }
        real_p.push(p);
        let (z, tape) = disc.logit_train(fake)?;
        let p = sigmoid(z.as_f64());
        let pg = guard_probability(p, eps)?;
        if !is_clamped(p, eps) {
            disc.backward(&tape, (pg / n as f64) as f32, false, true)?;
        }
        fake_p.push(p);
    }
    let loss_d = discriminator_loss(&real_p, &fake_p, eps)?;
    if !loss_d.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite discriminator loss {loss_d} at step {}",
            state.step
        )));
    }
    state.opt_d.update(&mut state.discriminator, lr);

    state.generator.zero_grad();
    let targets: Vec<&Tensor<f32>> = batch.iter().map(|(_, gt)| gt).collect();
    let loss_g = generator_objective_backward(
        &mut state.generator,
        &mut state.discriminator,
        &fakes,
        &targets,
        cfg.alpha,
        eps,
    )?;
    if !loss_g.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite generator loss {loss_g} at step {}",
            state.step
        )));
    }
    state.opt_g.update(&mut state.generator, lr);
    state.step += 1;
    Ok(StepLosses {
        generator: loss_g,
        discriminator: loss_d,
    })
}

/// Random access to training pairs.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(normalised LR input, folded HR stack)`
    fn load(&self, index: usize) -> Result<Pair>;
}

impl SampleSource for Vec<Pair> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn load(&self, index: usize) -> Result<Pair> {
        Ok(self[index].clone())
    }
}

impl SampleSource for DiskDataset {
    fn len(&self) -> usize {
        DiskDataset::len(self)
    }

    fn load(&self, index: usize) -> Result<Pair> {
        let (lr, hr) = DiskDataset::load(self, index)?;
        Ok((lr, hr.into_data()))
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub steps: usize,
}

pub const RUN_LOG: &str = "run_log.jsonl";

/// Sample order of one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Train until `state.config.epochs` epochs are complete, writing
/// `ckpt_epoch{E}` and appending to `run_log.jsonl` in `run_dir` after every
/// epoch. A state with `epoch > 0` resumes where it left off.
pub fn fit(data: &dyn SampleSource, mut state: TrainState, run_dir: &Path) -> Result<TrainState> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    state.config.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let log_path = run_dir.join(RUN_LOG);
    if state.epoch == 0 && log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    let cfg = state.config.clone();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = lr_at(epoch, &cfg)?;
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let (mut sum_g, mut sum_d, mut steps) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| data.load(i))
                .collect::<Result<Vec<_>>>()?;
            let losses = train_step(&mut state, &batch).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{m} (epoch {epoch}, batch {b})")),
                other => other,
            })?;
            log::debug!(
                "epoch {epoch} batch {b}: L_G {:.6} L_D {:.6}",
                losses.generator,
                losses.discriminator
            );
            sum_g += losses.generator;
            sum_d += losses.discriminator;
            steps += 1;
        }
        let record = EpochRecord {
            epoch,
            lr,
            loss_g: sum_g / steps as f64,
            loss_d: sum_d / steps as f64,
            steps,
        };
        log::info!(
            "epoch {epoch}: lr {lr:e} L_G {:.6} L_D {:.6} ({steps} steps)",
            record.loss_g,
            record.loss_d
        );
        state.epoch += 1;
        append_record(&log_path, &record)?;
        stack_io::save_checkpoint(
            &state,
            &run_dir.join(stack_io::checkpoint_name(state.epoch)),
        )?;
    }
    Ok(state)
}

fn append_record(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record).map_err(|e| Error::format(path, e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_run_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Highest-numbered `ckpt_epoch{E}` in `run_dir`, if any.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name();
        let Some(e) = name
            .to_str()
            .and_then(|s| s.strip_prefix("ckpt_epoch"))
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| e > *b) {
            best = Some((e, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

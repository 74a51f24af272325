//! `mfpinet`: synthesize data, train, infer, evaluate and profile.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mfpinet::discriminator::unfold_stack;
use mfpinet::metrics::{self, MetricReport};
use mfpinet::phantom::{self, bicubic_upscale, DegradationSpec, PhantomSpec, SplitPolicy};
use mfpinet::profiler::{self, ProfileResult};
use mfpinet::stack_io::{self, plane_depths, DiskDataset, FocalStack, Split};
use mfpinet::training::{self, TrainConfig, TrainState};
use mfpinet::{par, DiscriminatorConfig, Error, Generator, GeneratorConfig, Tensor};

const RESOLVED: &str = "resolved_config.json";

#[derive(Parser, Debug)]
#[command(
    name = "mfpinet",
    version,
    about = "Single-shot LR image to focal stack super resolution"
)]
struct Cli {
    /// JSON file with any of the sections phantom, degradation, split,
    /// generator, discriminator, train. Command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset of LR inputs and HR focal stacks.
    Synth(SynthArgs),
    /// Train on a dataset's training split.
    Train(TrainArgs),
    /// Predict focal stacks for LR images.
    Infer(InferArgs),
    /// Per-plane metrics on a dataset's test split, with a bicubic baseline.
    Eval(EvalArgs),
    /// Count FLOPs and parameters and time generator inference.
    Profile(ProfileArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long)]
    n_samples: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// HR canvas side in pixels; object count scales with area.
    #[arg(long)]
    canvas: Option<usize>,
    #[arg(long)]
    planes: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
    /// Put the first N samples in the training split instead of the
    /// 3-of-5 virtual-slide split.
    #[arg(long)]
    train_count: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints, the run log and the resolved config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint; epoch numbering carries on.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Resolve and write the configuration, then stop.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug, Serialize)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// An LR PNG, or a directory of them.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2.7)]
    plane_spacing: f64,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-plane gray error maps for every sample.
    #[arg(long)]
    error_maps: bool,
}

#[derive(Args, Debug, Serialize)]
struct ProfileArgs {
    #[arg(long)]
    out: PathBuf,
    /// Profile this checkpoint's generator instead of the configured one.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// LR input side in pixels.
    #[arg(long, default_value_t = 384)]
    input: usize,
    #[arg(long, default_value_t = 1000)]
    runs: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
}

/// Configuration sections that may appear in `--config`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    phantom: PhantomSpec,
    degradation: DegradationSpec,
    split: Option<SplitPolicy>,
    generator: GeneratorConfig,
    discriminator: Option<DiscriminatorConfig>,
    train: TrainConfig,
}

#[derive(Debug, Serialize)]
struct Provenance {
    config_file: Option<PathBuf>,
    command: String,
    arguments: serde_json::Value,
    sequential: bool,
    seed: Option<u64>,
    version: &'static str,
}

/// Everything a command ran with, written next to its outputs.
#[derive(Debug, Serialize)]
struct RunConfig {
    phantom: PhantomSpec,
    degradation: DegradationSpec,
    split: SplitPolicy,
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    train: TrainConfig,
    provenance: Provenance,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 1,
        Some(Error::Numeric(_)) => 3,
        Some(_) => 2,
        None if e
            .chain()
            .any(|c| c.is::<std::io::Error>() || c.is::<serde_json::Error>()) =>
        {
            2
        }
        None => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    par::set_sequential(cli.sequential);
    let file = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        file,
        config_file: cli.config.clone(),
        sequential: cli.sequential,
    };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Infer(a) => infer(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Profile(a) => profile(&ctx, a),
    }
}

struct Ctx {
    file: FileConfig,
    config_file: Option<PathBuf>,
    sequential: bool,
}

impl Ctx {
    fn resolve<A: Serialize>(
        &self,
        command: &str,
        args: &A,
        seed: Option<u64>,
        generator: Option<GeneratorConfig>,
        train: Option<TrainConfig>,
    ) -> anyhow::Result<RunConfig> {
        let generator = generator.unwrap_or_else(|| self.file.generator.clone());
        let discriminator = self
            .file
            .discriminator
            .clone()
            .unwrap_or_else(|| DiscriminatorConfig::for_planes(generator.n_planes));
        Ok(RunConfig {
            phantom: self.file.phantom.clone(),
            degradation: self.file.degradation.clone(),
            split: self.file.split.unwrap_or_default(),
            generator,
            discriminator,
            train: train.unwrap_or_else(|| self.file.train.clone()),
            provenance: Provenance {
                config_file: self.config_file.clone(),
                command: command.into(),
                arguments: serde_json::to_value(args)?,
                sequential: self.sequential,
                seed,
                version: env!("CARGO_PKG_VERSION"),
            },
        })
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(ctx: &Ctx, a: SynthArgs) -> anyhow::Result<()> {
    let mut rc = ctx.resolve("synth", &a, a.seed, None, None)?;
    if let Some(c) = a.canvas {
        rc.phantom = match a.objects {
            Some(_) => PhantomSpec {
                canvas_size: c,
                ..rc.phantom
            },
            None => rc.phantom.with_canvas(c),
        };
    }
    if let Some(n) = a.objects {
        rc.phantom.num_objects = n;
    }
    if let Some(p) = a.planes {
        rc.phantom.num_planes = p;
    }
    if let Some(s) = a.seed {
        rc.phantom.rng_seed = s;
    }
    if let Some(t) = a.train_count {
        rc.split = SplitPolicy::Explicit { train: t };
    }
    rc.provenance.seed = Some(rc.phantom.rng_seed);
    rc.phantom.validate()?;
    write_json(&a.out.join(RESOLVED), &rc)?;
    let m = phantom::make_dataset(a.n_samples, &rc.phantom, &rc.degradation, rc.split, &a.out)?;
    let train = m.split(Split::Train).len();
    log::info!(
        "wrote {} samples ({train} train, {} test) to {}",
        m.samples.len(),
        m.samples.len() - train,
        a.out.display()
    );
    Ok(())
}

fn train(ctx: &Ctx, a: TrainArgs) -> anyhow::Result<()> {
    let resumed = match &a.resume {
        Some(p) => Some(stack_io::load_checkpoint(p, None)?),
        None => None,
    };
    let mut tc = match &resumed {
        Some(s) => s.config.clone(),
        None => ctx.file.train.clone(),
    };
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.batch {
        tc.batch_size = v;
    }
    if let Some(v) = a.lr {
        tc.lr0 = v;
    }
    if let Some(v) = a.alpha {
        tc.alpha = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    tc.validate()?;
    let gen_cfg = resumed.as_ref().map(|s| s.generator.config().clone());
    let mut rc = ctx.resolve("train", &a, Some(tc.seed), gen_cfg, Some(tc.clone()))?;
    if let Some(s) = &resumed {
        rc.discriminator = s.discriminator.config().clone();
    }
    write_json(&a.out.join(RESOLVED), &rc)?;
    if a.dry_run {
        return Ok(());
    }
    let data = DiskDataset::open(&a.data, Split::Train)?;
    let state = match resumed {
        Some(mut s) => {
            if s.epoch > tc.epochs {
                bail!(Error::Config(format!(
                    "checkpoint is at epoch {} but only {} epochs are configured",
                    s.epoch, tc.epochs
                )));
            }
            s.config = tc;
            s
        }
        None => TrainState::new(rc.generator.clone(), rc.discriminator.clone(), tc)?,
    };
    log::info!(
        "training on {} samples from epoch {} to {}",
        data.len(),
        state.epoch,
        state.config.epochs
    );
    let state = training::fit(&data, state, &a.out)?;
    log::info!(
        "finished at epoch {} after {} steps",
        state.epoch,
        state.step
    );
    Ok(())
}

fn lr_inputs(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(input)
            .with_context(|| format!("listing {}", input.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        Ok(v)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(anyhow!(Error::Config(format!(
            "input {} does not exist",
            input.display()
        ))))
    }
}

fn infer(ctx: &Ctx, a: InferArgs) -> anyhow::Result<()> {
    let state = stack_io::load_checkpoint(&a.ckpt, None)?;
    let rc = ctx.resolve(
        "infer",
        &a,
        None,
        Some(state.generator.config().clone()),
        Some(state.config.clone()),
    )?;
    write_json(&a.out.join(RESOLVED), &rc)?;
    let depths = plane_depths(rc.generator.n_planes, a.plane_spacing);
    let inputs = lr_inputs(&a.input)?;
    for p in &inputs {
        let lr = stack_io::load_lr(p)?;
        let y = state.generator.forward(&lr)?;
        let stack = unfold_stack(&y, depths.clone())?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("stack");
        stack_io::save_stack(&stack, &a.out.join(stem))?;
    }
    log::info!("wrote {} stacks to {}", inputs.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    model: MetricReport,
    bicubic_baseline: MetricReport,
}

fn eval(ctx: &Ctx, a: EvalArgs) -> anyhow::Result<()> {
    let state = stack_io::load_checkpoint(&a.ckpt, None)?;
    let rc = ctx.resolve(
        "eval",
        &a,
        None,
        Some(state.generator.config().clone()),
        Some(state.config.clone()),
    )?;
    write_json(&a.out.join(RESOLVED), &rc)?;
    let data = DiskDataset::open(&a.data, Split::Test)?;
    if data.is_empty() {
        bail!(Error::Config(format!(
            "{} has no test samples",
            a.data.display()
        )));
    }
    let n_planes = state.generator.config().n_planes;
    let (mut preds, mut gts, mut base) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..data.len() {
        let (lr, gt) = data.load(i)?;
        if gt.num_planes() != n_planes {
            bail!(Error::Incompatible(format!(
                "checkpoint predicts {n_planes} planes but {} has {}",
                data.records()[i].id,
                gt.num_planes()
            )));
        }
        let y = state.generator.forward(&lr)?;
        let pred = unfold_stack(&y, gt.plane_depths().to_vec())?;
        base.push(metrics::replicate_plane(
            &bicubic_upscale(&lr, 2),
            gt.plane_depths().to_vec(),
        )?);
        if a.error_maps {
            let id = &data.records()[i].id;
            write_error_maps(&pred, &gt, &a.out.join("error_maps").join(id))?;
        }
        preds.push(pred);
        gts.push(gt);
    }
    let out = EvalOutput {
        model: metrics::evaluate_stacks(&preds, &gts)?,
        bicubic_baseline: metrics::evaluate_stacks(&base, &gts)?,
    };
    let table = format!(
        "{}\n{}",
        out.model.table("model"),
        out.bicubic_baseline.table("bicubic baseline")
    );
    print!("{table}");
    fs::write(a.out.join("report.txt"), &table).context("writing report.txt")?;
    write_json(&a.out.join("report.json"), &out)
}

fn write_error_maps(pred: &FocalStack, gt: &FocalStack, dir: &Path) -> anyhow::Result<()> {
    for (k, m) in metrics::stack_error_maps(pred, gt)?.iter().enumerate() {
        let img: Tensor<f32> = m.map(|v| v.clamp(0.0, 255.0)).cast();
        stack_io::write_png(&dir.join(stack_io::plane_file_name(k)), &img)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ProfileOutput {
    result: ProfileResult,
    flops: profiler::FlopReport,
}

fn profile(ctx: &Ctx, a: ProfileArgs) -> anyhow::Result<()> {
    let generator = match &a.ckpt {
        Some(p) => stack_io::load_checkpoint(p, None)?.generator,
        None => Generator::new(ctx.file.generator.clone(), ctx.file.train.seed)?,
    };
    let rc = ctx.resolve("profile", &a, None, Some(generator.config().clone()), None)?;
    write_json(&a.out.join(RESOLVED), &rc)?;
    let result = profiler::benchmark_forward(&generator, (a.input, a.input), a.runs, a.warmup)?;
    let flops = profiler::count_flops(generator.config(), a.input, a.input)?;
    let table = result.table("mfpinet");
    print!("{table}");
    fs::write(a.out.join("profile.txt"), &table).context("writing profile.txt")?;
    write_json(
        &a.out.join("profile.json"),
        &ProfileOutput { result, flops },
    )
}

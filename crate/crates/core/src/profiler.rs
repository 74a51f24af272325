//! Parameter and FLOP accounting plus wall-clock inference benchmarks.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, LayerKind, LayerOp, COLOR_CHANNELS};
use crate::nn::Parameters;
use crate::par;
use crate::tensor::Tensor;

pub const FLOP_CONVENTION: &str =
    "multiply-accumulate = 2 FLOPs; activation, pooling, upsampling, residual add and tanh = 1 FLOP per output element; concat and pixel shuffle = 0";

pub const MIN_RUNS: usize = 100;
pub const MIN_WARMUP: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub input_shape: (usize, usize, usize),
    pub output_shape: (usize, usize, usize),
    pub layers: Vec<LayerOp>,
    pub total_flops: u64,
    pub conv_flops: u64,
    pub params: usize,
    pub convention: String,
}

impl FlopReport {
    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }
}

/// Itemised FLOPs of one generator forward pass at `h x w` input.
pub fn count_flops(cfg: &GeneratorConfig, h: usize, w: usize) -> Result<FlopReport> {
    let layers = cfg.layer_plan(h, w)?;
    let total_flops = layers.iter().map(|l| l.flops).sum();
    let conv_flops = layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Conv(_)))
        .map(|l| l.flops)
        .sum();
    let params = layers.iter().map(|l| l.params).sum();
    let output_shape = layers.last().map(|l| l.output).unwrap_or((0, 0, 0));
    Ok(FlopReport {
        input_shape: (COLOR_CHANNELS, h, w),
        output_shape,
        layers,
        total_flops,
        conv_flops,
        params,
        convention: FLOP_CONVENTION.into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareInfo {
    pub cpu: String,
    pub logical_cores: usize,
    pub worker_threads: usize,
    pub parallel: bool,
    pub os: String,
    pub arch: String,
}

impl HardwareInfo {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|t| {
                t.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|s| s.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        HardwareInfo {
            cpu,
            logical_cores: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            worker_threads: par::num_threads(),
            parallel: par::is_parallel(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileResult {
    pub gflops: f64,
    pub params: usize,
    pub params_millions: f64,
    pub mean_latency_ms: f64,
    pub std_latency_ms: f64,
    pub min_latency_ms: f64,
    pub max_latency_ms: f64,
    pub latency_samples: usize,
    pub warmup_runs: usize,
    pub input_shape: (usize, usize, usize),
    pub output_shape: (usize, usize, usize),
    pub flop_convention: String,
    pub hardware: HardwareInfo,
    #[serde(skip)]
    pub samples_ms: Vec<f64>,
}

impl ProfileResult {
    /// One row in the column layout `model | GFLOPs | params (M) | time (ms)`.
    pub fn table(&self, model: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>11} {:>10}",
            "model", "gflops", "params_m", "time_ms"
        );
        let _ = writeln!(
            s,
            "{:<12} {:>10.1} {:>11.2} {:>10.1}",
            model, self.gflops, self.params_millions, self.mean_latency_ms
        );
        s
    }
}

/// Time `n_runs` generator forward passes on a fixed `h x w` input after
/// `warmup` untimed passes.
pub fn benchmark_forward(
    gen: &Generator<f32>,
    input_hw: (usize, usize),
    n_runs: usize,
    warmup: usize,
) -> Result<ProfileResult> {
    if n_runs < MIN_RUNS || warmup < MIN_WARMUP {
        return Err(Error::Config(format!(
            "benchmark needs at least {MIN_RUNS} timed and {MIN_WARMUP} warmup runs, got {n_runs} and {warmup}"
        )));
    }
    let (h, w) = input_hw;
    let flops = count_flops(gen.config(), h, w)?;
    let x = Tensor::from_fn(COLOR_CHANNELS, h, w, |c, y, x| {
        (((c * 7 + y * 3 + x * 5) % 17) as f32 / 8.0) - 1.0
    });
    let mut out_shape = (0, 0, 0);
    for _ in 0..warmup {
        out_shape = gen.forward(&x)?.shape();
    }
    let mut samples = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let t = Instant::now();
        let y = gen.forward(&x)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(&y);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let params = gen.num_params();
    Ok(ProfileResult {
        gflops: flops.gflops(),
        params,
        params_millions: params as f64 / 1e6,
        mean_latency_ms: mean,
        std_latency_ms: var.sqrt(),
        min_latency_ms: samples.iter().cloned().fold(f64::INFINITY, f64::min),
        max_latency_ms: samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        latency_samples: samples.len(),
        warmup_runs: warmup,
        input_shape: (COLOR_CHANNELS, h, w),
        output_shape: out_shape,
        flop_convention: FLOP_CONVENTION.into(),
        hardware: HardwareInfo::detect(),
        samples_ms: samples,
    })
}

/// Cost of producing `n_planes` planes one at a time relative to one
/// single-shot pass.
pub fn speedup_estimate(
    single_plane_cost: f64,
    n_planes: usize,
    one_shot_cost: f64,
) -> Result<f64> {
    if !(single_plane_cost > 0.0) || !(one_shot_cost > 0.0) || n_planes == 0 {
        return Err(Error::Config(format!(
            "costs must be positive and planes non-zero, got {single_plane_cost}, {n_planes}, {one_shot_cost}"
        )));
    }
    Ok(single_plane_cost * n_planes as f64 / one_shot_cost)
}

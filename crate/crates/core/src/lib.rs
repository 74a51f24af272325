//! Single-shot 2D-to-focal-stack super resolution.
//!
//! A generator maps one low-resolution RGB image to an `n`-plane,
//! twice-as-large focal stack; a discriminator scores whole stacks for
//! adversarial training. The crate also ships a synthetic defocus phantom
//! generator, the on-disk dataset and checkpoint formats, image quality
//! metrics, and a FLOP/latency profiler.
//!
//! Tensors are channel-major `(C, H, W)`. A focal stack with `Z` planes is
//! stored folded as `(3Z, H, W)`: plane `k` occupies channels `3k..3k+3`,
//! planes ordered by ascending depth.
//!
//! Heavy kernels run on rayon unless the `parallel` feature is disabled or
//! [`par::set_sequential`] is called; both paths produce identical bits.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod discriminator;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod phantom;
pub mod profiler;
pub mod stack_io;
pub mod tensor;
pub mod training;

pub use discriminator::{fold_stack, unfold_stack, Discriminator, DiscriminatorConfig};
pub use error::{Error, Result};
pub use generator::{count_generator_params, FeaturePyramid, Generator, GeneratorConfig};
pub use metrics::{evaluate_stacks, MetricReport};
pub use phantom::{degrade, make_dataset, render_stack, DegradationSpec, PhantomSpec, SplitPolicy};
pub use profiler::{benchmark_forward, count_flops, speedup_estimate, ProfileResult};
pub use stack_io::{load_checkpoint, load_stack, save_checkpoint, save_stack, FocalStack};
pub use tensor::Tensor;
pub use training::{fit, lr_at, train_step, TrainConfig, TrainState};

/// Independent seed for stream `stream` of a base seed (splitmix64).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

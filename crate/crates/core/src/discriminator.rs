//! Real/fake classifier over whole focal stacks folded into channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::generator::{LayerKind, LayerOp, Plan, COLOR_CHANNELS};
use crate::nn::{self, join, Conv2d, ConvShape, Linear, Param, Parameters};
use crate::stack_io::FocalStack;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::for_planes(11)
    }
}

impl DiscriminatorConfig {
    pub fn for_planes(n_planes: usize) -> Self {
        DiscriminatorConfig {
            in_channels: n_planes * COLOR_CHANNELS,
            widths: vec![64, 64, 128, 128, 256, 256, 512, 512],
            strides: vec![1, 2, 1, 2, 1, 2, 1, 2],
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || !self.in_channels.is_multiple_of(COLOR_CHANNELS) {
            return Err(Error::Config(format!(
                "discriminator: in_channels {} is not a positive multiple of {COLOR_CHANNELS}",
                self.in_channels
            )));
        }
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(
                "discriminator: widths and strides must be non-empty and equally long".into(),
            ));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("discriminator: zero width or stride".into()));
        }
        Ok(())
    }

    /// Product of all strides; input dims must be a multiple of it.
    pub fn input_multiple(&self) -> usize {
        self.strides.iter().product()
    }

    fn conv_shapes(&self) -> Vec<ConvShape> {
        let mut cin = self.in_channels;
        self.widths
            .iter()
            .zip(&self.strides)
            .map(|(&w, &s)| {
                let shape = ConvShape::new(cin, w, 3, s);
                cin = w;
                shape
            })
            .collect()
    }

    pub fn layer_plan(&self, h: usize, w: usize) -> Result<Vec<LayerOp>> {
        self.validate()?;
        let mut plan = Plan::default();
        let (mut h, mut w) = (h, w);
        for (i, s) in self.conv_shapes().into_iter().enumerate() {
            plan.conv(&format!("conv{i}"), s, h, w);
            (h, w) = s.out_hw(h, w);
            plan.pointwise(&format!("act{i}"), LayerKind::LeakyRelu, s.cout, h, w, 0);
        }
        let c = *self.widths.last().expect("validated");
        plan.pointwise("pool", LayerKind::GlobalPool, c, 1, 1, 0);
        plan.ops.push(LayerOp {
            name: "head".into(),
            kind: LayerKind::Linear,
            output: (1, 1, 1),
            params: c + 1,
            flops: 2 * c as u64,
        });
        plan.pointwise("sigmoid", LayerKind::Sigmoid, 1, 1, 1, 0);
        Ok(plan.ops)
    }
}

/// Fold an `H x W x Z x C` stack into an `H x W x (Z*C)` image, plane-major.
pub fn fold_stack(stack: &FocalStack) -> Tensor<f32> {
    stack.data().clone()
}

/// Inverse of [`fold_stack`].
pub fn unfold_stack(folded: &Tensor<f32>, plane_depths: Vec<f64>) -> Result<FocalStack> {
    FocalStack::new(folded.clone(), plane_depths)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    cfg: DiscriminatorConfig,
    pub convs: Vec<Conv2d<T>>,
    pub head: Linear<T>,
}

/// Saved activations for [`Discriminator::backward`].
#[derive(Clone, Debug)]
pub struct DiscriminatorTape<T> {
    input: Tensor<T>,
    pre: Vec<Tensor<T>>,
    pooled: Vec<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = cfg
            .conv_shapes()
            .into_iter()
            .map(|s| Conv2d::new(s, &mut rng))
            .collect();
        let head = Linear::new(*cfg.widths.last().expect("validated"), 1, &mut rng);
        Ok(Discriminator { cfg, convs, head })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        ensure_shape!(
            x.channels() == self.cfg.in_channels,
            "discriminator expects {} channels, got {}",
            self.cfg.in_channels,
            x.channels()
        );
        let m = self.cfg.input_multiple();
        ensure_shape!(
            x.height() >= 2 * m
                && x.width() >= 2 * m
                && x.height().is_multiple_of(m)
                && x.width().is_multiple_of(m),
            "discriminator input {}x{} must be a multiple of {m} and at least {}",
            x.height(),
            x.width(),
            2 * m
        );
        Ok(())
    }

    /// Pre-sigmoid score of one folded stack.
    pub fn logit(&self, x: &Tensor<T>) -> Result<T> {
        Ok(self.run(x, false)?.0)
    }

    pub fn logit_train(&self, x: &Tensor<T>) -> Result<(T, DiscriminatorTape<T>)> {
        let (z, tape) = self.run(x, true)?;
        Ok((z, tape.expect("recorded")))
    }

    /// Probability that `x` is a real stack.
    pub fn probability(&self, x: &Tensor<T>) -> Result<f64> {
        Ok(nn::sigmoid(self.logit(x)?.as_f64()))
    }

    pub fn probabilities(&self, batch: &[Tensor<T>]) -> Result<Vec<f64>> {
        batch.iter().map(|x| self.probability(x)).collect()
    }

    fn run(&self, x: &Tensor<T>, record: bool) -> Result<(T, Option<DiscriminatorTape<T>>)> {
        self.check_input(x)?;
        let slope = self.cfg.leaky_slope;
        let mut pre = Vec::new();
        let mut h = self.convs[0].forward(x)?;
        for conv in &self.convs[1..] {
            let a = nn::leaky_relu(&h, slope);
            if record {
                pre.push(h);
            }
            h = conv.forward(&a)?;
        }
        let a = nn::leaky_relu(&h, slope);
        if record {
            pre.push(h);
        }
        let pooled = nn::global_avg_pool(&a);
        let z = self.head.forward(&pooled)?[0];
        let tape = record.then(|| DiscriminatorTape {
            input: x.clone(),
            pre,
            pooled,
        });
        Ok((z, tape))
    }

    /// Backpropagate `d loss / d logit`. Returns the input gradient when
    /// `input_grad`; parameter gradients accumulate only when `weight_grads`.
    pub fn backward(
        &mut self,
        tape: &DiscriminatorTape<T>,
        g_logit: T,
        input_grad: bool,
        weight_grads: bool,
    ) -> Result<Option<Tensor<T>>> {
        let slope = self.cfg.leaky_slope;
        let gp = self.head.backward(&tape.pooled, &[g_logit], weight_grads);
        let last = tape.pre.last().expect("recorded");
        let mut g = nn::global_avg_pool_backward(&gp, last.height(), last.width());
        let n = self.convs.len();
        for i in (0..n).rev() {
            g = nn::leaky_relu_backward(&tape.pre[i], &g, slope);
            let want_input = i > 0 || input_grad;
            let gi = if i == 0 {
                self.convs[0].backward(&tape.input, &g, want_input, weight_grads)?
            } else {
                let a = nn::leaky_relu(&tape.pre[i - 1], slope);
                self.convs[i].backward(&a, &g, want_input, weight_grads)?
            };
            match gi {
                Some(gi) => g = gi,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }
}

impl<T: Scalar> Parameters<T> for Discriminator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            f(&join(prefix, &format!("conv{i}.weight")), &c.weight);
            f(&join(prefix, &format!("conv{i}.bias")), &c.bias);
        }
        f(&join(prefix, "head.weight"), &self.head.weight);
        f(&join(prefix, "head.bias"), &self.head.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(&join(prefix, &format!("conv{i}.weight")), &mut c.weight);
            f(&join(prefix, &format!("conv{i}.bias")), &mut c.bias);
        }
        f(&join(prefix, "head.weight"), &mut self.head.weight);
        f(&join(prefix, "head.bias"), &mut self.head.bias);
    }
}

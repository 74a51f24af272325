//! The multi-focal-plane generator.
//!
//! A U-shaped encoder/decoder without normalisation layers:
//!
//! * encoder: `Conv(3->64) + PReLU` gives `f1`; three encoding modules
//!   (two residual blocks then 2x2 average pooling) give `f2`, `f3` and the
//!   1/8-scale trunk, which a three-conv stack (64->128->128->64) turns into `f4`.
//! * decoder: three decoding modules, each upsampling the deeper map 2x
//!   (nearest), concatenating it with the skip `f_k` and running two residual
//!   blocks (the first maps 128->64 channels); then `Conv(64->256)`, pixel
//!   shuffle x2, `Conv(64->3n)` and tanh.
//!
//! Output channel `3k + c` holds colour `c` of focal plane `k`, planes in
//! ascending depth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::nn::{self, join, Conv2d, ConvShape, Param, Parameters, Prelu};
use crate::tensor::{Scalar, Tensor};

/// Colour channels of input images and of every output plane.
pub const COLOR_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub bottleneck_channels: usize,
    pub num_rem: usize,
    pub rb_convs: usize,
    pub n_planes: usize,
    pub upscale: usize,
    pub sr_head_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 64,
            bottleneck_channels: 128,
            num_rem: 3,
            rb_convs: 4,
            n_planes: 11,
            upscale: 2,
            sr_head_channels: 256,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.num_rem != 3 {
            return bad("exactly three encoding modules are supported");
        }
        if self.upscale != 2 {
            return bad("only x2 upscaling is supported");
        }
        if self.base_channels == 0 || self.bottleneck_channels == 0 || self.n_planes == 0 {
            return bad("channel widths and plane count must be positive");
        }
        if self.rb_convs == 0 {
            return bad("residual blocks need at least one convolution");
        }
        if self.sr_head_channels == 0
            || !self
                .sr_head_channels
                .is_multiple_of(self.upscale * self.upscale)
        {
            return bad("sr_head_channels must be a positive multiple of upscale^2");
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        COLOR_CHANNELS * self.n_planes
    }

    /// Spatial divisor the input height and width must honour.
    pub fn input_multiple(&self) -> usize {
        1 << self.num_rem
    }

    fn shuffled_channels(&self) -> usize {
        self.sr_head_channels / (self.upscale * self.upscale)
    }

    /// Every operation of one forward pass at the given input size, in order.
    pub fn layer_plan(&self, h: usize, w: usize) -> Result<Vec<LayerOp>> {
        self.validate()?;
        check_input_dims(self, COLOR_CHANNELS, h, w)?;
        let mut plan = Plan::default();
        let b = self.base_channels;
        let (mut h, mut w) = (h, w);

        plan.conv("pre.conv", ConvShape::new(COLOR_CHANNELS, b, 3, 1), h, w);
        plan.pointwise("pre.act", LayerKind::Prelu, b, h, w, 1);
        let mut skips = vec![(h, w)];
        for r in 0..self.num_rem {
            plan.residual(&format!("enc.rem{r}.rb0"), self, b, b, h, w);
            plan.residual(&format!("enc.rem{r}.rb1"), self, b, b, h, w);
            h /= 2;
            w /= 2;
            plan.pointwise(&format!("enc.rem{r}.pool"), LayerKind::AvgPool, b, h, w, 0);
            if r + 1 < self.num_rem {
                skips.push((h, w));
            }
        }
        let k = self.bottleneck_channels;
        let scl = [(b, k), (k, k), (k, b)];
        for (i, &(ci, co)) in scl.iter().enumerate() {
            plan.conv(
                &format!("enc.scl.conv{i}"),
                ConvShape::new(ci, co, 3, 1),
                h,
                w,
            );
            plan.pointwise(&format!("enc.scl.act{i}"), LayerKind::Prelu, co, h, w, 1);
        }
        for (d, &(sh, sw)) in skips.iter().rev().enumerate() {
            h = sh;
            w = sw;
            plan.pointwise(
                &format!("dec.rdm{d}.upsample"),
                LayerKind::Upsample,
                b,
                h,
                w,
                0,
            );
            plan.pointwise(
                &format!("dec.rdm{d}.concat"),
                LayerKind::Concat,
                2 * b,
                h,
                w,
                0,
            );
            plan.residual(&format!("dec.rdm{d}.rb0"), self, 2 * b, b, h, w);
            plan.residual(&format!("dec.rdm{d}.rb1"), self, b, b, h, w);
        }
        let s = self.sr_head_channels;
        plan.conv("srr.conv", ConvShape::new(b, s, 3, 1), h, w);
        h *= self.upscale;
        w *= self.upscale;
        plan.pointwise(
            "srr.shuffle",
            LayerKind::PixelShuffle,
            self.shuffled_channels(),
            h,
            w,
            0,
        );
        plan.conv(
            "srr.out",
            ConvShape::new(self.shuffled_channels(), self.output_channels(), 3, 1),
            h,
            w,
        );
        plan.pointwise("srr.tanh", LayerKind::Tanh, self.output_channels(), h, w, 0);
        Ok(plan.ops)
    }
}

/// One operation of the forward pass, as seen by the profiler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOp {
    pub name: String,
    pub kind: LayerKind,
    /// `(channels, height, width)` of the produced tensor.
    pub output: (usize, usize, usize),
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv(ConvShape),
    Prelu,
    LeakyRelu,
    AvgPool,
    Upsample,
    Concat,
    PixelShuffle,
    Tanh,
    Add,
    GlobalPool,
    Linear,
    Sigmoid,
}

#[derive(Default)]
pub(crate) struct Plan {
    pub(crate) ops: Vec<LayerOp>,
}

impl Plan {
    pub(crate) fn conv(&mut self, name: &str, s: ConvShape, h: usize, w: usize) {
        let (ho, wo) = s.out_hw(h, w);
        self.ops.push(LayerOp {
            name: name.to_string(),
            kind: LayerKind::Conv(s),
            output: (s.cout, ho, wo),
            params: s.num_params(),
            flops: s.flops(h, w),
        });
    }

    /// Elementwise or data-movement op producing a `c x h x w` tensor.
    pub(crate) fn pointwise(
        &mut self,
        name: &str,
        kind: LayerKind,
        c: usize,
        h: usize,
        w: usize,
        params: usize,
    ) {
        let flops = match kind {
            LayerKind::Concat | LayerKind::PixelShuffle => 0,
            _ => (c * h * w) as u64,
        };
        self.ops.push(LayerOp {
            name: name.to_string(),
            kind,
            output: (c, h, w),
            params,
            flops,
        });
    }

    fn residual(
        &mut self,
        name: &str,
        cfg: &GeneratorConfig,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
    ) {
        for i in 0..cfg.rb_convs {
            let ci = if i == 0 { cin } else { cout };
            self.conv(
                &format!("{name}.conv{i}"),
                ConvShape::new(ci, cout, 3, 1),
                h,
                w,
            );
            if i + 1 < cfg.rb_convs {
                self.pointwise(&format!("{name}.act{i}"), LayerKind::Prelu, cout, h, w, 1);
            }
        }
        if cin != cout {
            self.conv(
                &format!("{name}.proj"),
                ConvShape::new(cin, cout, 1, 1),
                h,
                w,
            );
        }
        self.pointwise(&format!("{name}.add"), LayerKind::Add, cout, h, w, 0);
    }
}

/// Exact parameter count (weights, biases and PReLU slopes).
pub fn count_generator_params(cfg: &GeneratorConfig) -> Result<usize> {
    let m = cfg.input_multiple();
    Ok(cfg.layer_plan(m, m)?.iter().map(|op| op.params).sum())
}

fn check_input_dims(cfg: &GeneratorConfig, c: usize, h: usize, w: usize) -> Result<()> {
    ensure_shape!(
        c == COLOR_CHANNELS,
        "generator input must have {COLOR_CHANNELS} channels, got {c}"
    );
    let m = cfg.input_multiple();
    ensure_shape!(
        h > 0 && w > 0 && h.is_multiple_of(m) && w.is_multiple_of(m),
        "generator input {h}x{w} must be a positive multiple of {m}"
    );
    Ok(())
}

/// Residual block: `rb_convs` 3x3 convolutions, PReLU after all but the last,
/// plus an identity skip (1x1 projection when the width changes).
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T> {
    pub convs: Vec<Conv2d<T>>,
    pub acts: Vec<Prelu<T>>,
    pub proj: Option<Conv2d<T>>,
}

/// Saved activations of one residual block.
#[derive(Clone, Debug)]
pub struct ResidualTape<T> {
    input: Tensor<T>,
    /// Pre-activation outputs of every conv but the last.
    pre: Vec<Tensor<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new<R: rand::Rng>(cin: usize, cout: usize, n_convs: usize, rng: &mut R) -> Self {
        let convs = (0..n_convs)
            .map(|i| {
                Conv2d::new(
                    ConvShape::new(if i == 0 { cin } else { cout }, cout, 3, 1),
                    rng,
                )
            })
            .collect();
        let acts = (0..n_convs.saturating_sub(1))
            .map(|_| Prelu::default())
            .collect();
        let proj = (cin != cout).then(|| Conv2d::new(ConvShape::new(cin, cout, 1, 1), rng));
        ResidualBlock { convs, acts, proj }
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].shape.cin
    }

    pub fn out_channels(&self) -> usize {
        self.convs[0].shape.cout
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, false)?.0)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ResidualTape<T>)> {
        let (y, tape) = self.run(x, true)?;
        Ok((y, tape.expect("recorded")))
    }

    fn run(&self, x: &Tensor<T>, record: bool) -> Result<(Tensor<T>, Option<ResidualTape<T>>)> {
        ensure_shape!(
            x.channels() == self.in_channels(),
            "residual block expects {} channels, got {}",
            self.in_channels(),
            x.channels()
        );
        let mut pre = Vec::new();
        let mut h = self.convs[0].forward(x)?;
        for (conv, act) in self.convs[1..].iter().zip(&self.acts) {
            let a = act.forward(&h);
            if record {
                pre.push(h);
            }
            h = conv.forward(&a)?;
        }
        match &self.proj {
            Some(p) => h.add_assign(&p.forward(x)?)?,
            None => h.add_assign(x)?,
        }
        let tape = record.then(|| ResidualTape {
            input: x.clone(),
            pre,
        });
        Ok((h, tape))
    }

    pub fn backward(&mut self, tape: &ResidualTape<T>, gout: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.convs.len();
        let mut g = gout.clone();
        let mut gx = None;
        for i in (0..n).rev() {
            let ga = if i == 0 {
                self.convs[0].backward(&tape.input, &g, true, true)?
            } else {
                let a = self.acts[i - 1].forward(&tape.pre[i - 1]);
                self.convs[i].backward(&a, &g, true, true)?
            }
            .expect("input grad requested");
            if i == 0 {
                gx = Some(ga);
            } else {
                g = self.acts[i - 1].backward(&tape.pre[i - 1], &ga);
            }
        }
        let mut gx = gx.expect("at least one conv");
        match self.proj.as_mut() {
            Some(p) => gx.add_assign(
                &p.backward(&tape.input, gout, true, true)?
                    .expect("input grad"),
            )?,
            None => gx.add_assign(gout)?,
        }
        Ok(gx)
    }
}

impl<T: Scalar> Parameters<T> for ResidualBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            f(&join(prefix, &format!("conv{i}.weight")), &c.weight);
            f(&join(prefix, &format!("conv{i}.bias")), &c.bias);
        }
        for (i, a) in self.acts.iter().enumerate() {
            f(&join(prefix, &format!("act{i}.slope")), &a.slope);
        }
        if let Some(p) = &self.proj {
            f(&join(prefix, "proj.weight"), &p.weight);
            f(&join(prefix, "proj.bias"), &p.bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(&join(prefix, &format!("conv{i}.weight")), &mut c.weight);
            f(&join(prefix, &format!("conv{i}.bias")), &mut c.bias);
        }
        for (i, a) in self.acts.iter_mut().enumerate() {
            f(&join(prefix, &format!("act{i}.slope")), &mut a.slope);
        }
        if let Some(p) = self.proj.as_mut() {
            f(&join(prefix, "proj.weight"), &mut p.weight);
            f(&join(prefix, "proj.bias"), &mut p.bias);
        }
    }
}

/// Encoder outputs at scales 1, 1/2, 1/4 and 1/8 of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub f1: Tensor<T>,
    pub f2: Tensor<T>,
    pub f3: Tensor<T>,
    pub f4: Tensor<T>,
}

impl<T: Scalar> FeaturePyramid<T> {
    fn levels(&self) -> [&Tensor<T>; 4] {
        [&self.f1, &self.f2, &self.f3, &self.f4]
    }
}

/// Two residual blocks; followed by pooling in the encoder, preceded by
/// upsample-and-concat in the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPair<T> {
    pub first: ResidualBlock<T>,
    pub second: ResidualBlock<T>,
}

impl<T: Scalar> ResidualPair<T> {
    fn new<R: rand::Rng>(cin: usize, cout: usize, n_convs: usize, rng: &mut R) -> Self {
        ResidualPair {
            first: ResidualBlock::new(cin, cout, n_convs, rng),
            second: ResidualBlock::new(cout, cout, n_convs, rng),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.first.visit(&join(prefix, "rb0"), f);
        self.second.visit(&join(prefix, "rb1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.first.visit_mut(&join(prefix, "rb0"), f);
        self.second.visit_mut(&join(prefix, "rb1"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    cfg: GeneratorConfig,
    pub pre_conv: Conv2d<T>,
    pub pre_act: Prelu<T>,
    pub rems: Vec<ResidualPair<T>>,
    pub scl_convs: Vec<Conv2d<T>>,
    pub scl_acts: Vec<Prelu<T>>,
    pub rdms: Vec<ResidualPair<T>>,
    pub srr_conv: Conv2d<T>,
    pub out_conv: Conv2d<T>,
}

/// Saved activations for [`Generator::backward`].
#[derive(Clone, Debug)]
pub struct GeneratorTape<T> {
    input: Tensor<T>,
    pre_z: Tensor<T>,
    rems: Vec<(ResidualTape<T>, ResidualTape<T>)>,
    /// Input to the first stacked conv and the pre-activations of all three.
    scl_in: Tensor<T>,
    scl_z: Vec<Tensor<T>>,
    rdms: Vec<(ResidualTape<T>, ResidualTape<T>)>,
    fused: Tensor<T>,
    shuffled: Tensor<T>,
    output: Tensor<T>,
}

impl<T: Scalar> Generator<T> {
    /// Randomly initialised weights, deterministic in `seed`.
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = cfg.base_channels;
        let k = cfg.bottleneck_channels;
        let pre_conv = Conv2d::new(ConvShape::new(COLOR_CHANNELS, b, 3, 1), &mut rng);
        let rems = (0..cfg.num_rem)
            .map(|_| ResidualPair::new(b, b, cfg.rb_convs, &mut rng))
            .collect();
        let scl_convs = [(b, k), (k, k), (k, b)]
            .iter()
            .map(|&(ci, co)| Conv2d::new(ConvShape::new(ci, co, 3, 1), &mut rng))
            .collect();
        let rdms = (0..cfg.num_rem)
            .map(|_| ResidualPair::new(2 * b, b, cfg.rb_convs, &mut rng))
            .collect();
        let srr_conv = Conv2d::new(ConvShape::new(b, cfg.sr_head_channels, 3, 1), &mut rng);
        let out_conv = Conv2d::new(
            ConvShape::new(cfg.shuffled_channels(), cfg.output_channels(), 3, 1),
            &mut rng,
        );
        Ok(Generator {
            pre_conv,
            pre_act: Prelu::default(),
            rems,
            scl_convs,
            scl_acts: (0..3).map(|_| Prelu::default()).collect(),
            rdms,
            srr_conv,
            out_conv,
            cfg,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        self.encode_impl(x, None)
    }

    pub fn decode(&self, p: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        self.decode_impl(p, None)
    }

    /// Inference forward pass: `(3, H, W) -> (3n, 2H, 2W)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.encode(x)?;
        self.decode(&p)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, GeneratorTape<T>)> {
        let mut tape = GeneratorTape {
            input: x.clone(),
            pre_z: Tensor::zeros(0, 0, 0),
            rems: Vec::new(),
            scl_in: Tensor::zeros(0, 0, 0),
            scl_z: Vec::new(),
            rdms: Vec::new(),
            fused: Tensor::zeros(0, 0, 0),
            shuffled: Tensor::zeros(0, 0, 0),
            output: Tensor::zeros(0, 0, 0),
        };
        let p = self.encode_impl(x, Some(&mut tape))?;
        let y = self.decode_impl(&p, Some(&mut tape))?;
        Ok((y, tape))
    }

    fn encode_impl(
        &self,
        x: &Tensor<T>,
        mut tape: Option<&mut GeneratorTape<T>>,
    ) -> Result<FeaturePyramid<T>> {
        check_input_dims(&self.cfg, x.channels(), x.height(), x.width())?;
        let z = self.pre_conv.forward(x)?;
        let f1 = self.pre_act.forward(&z);
        if let Some(t) = tape.as_deref_mut() {
            t.pre_z = z;
        }
        let mut levels = vec![f1];
        for rem in &self.rems {
            let input = levels.last().expect("non-empty");
            let h = if let Some(t) = tape.as_deref_mut() {
                let (a, ta) = rem.first.forward_train(input)?;
                let (b, tb) = rem.second.forward_train(&a)?;
                t.rems.push((ta, tb));
                b
            } else {
                rem.second.forward(&rem.first.forward(input)?)?
            };
            levels.push(nn::avg_pool2(&h)?);
        }
        let mut h = levels.pop().expect("trunk");
        if let Some(t) = tape.as_deref_mut() {
            t.scl_in = h.clone();
        }
        for (conv, act) in self.scl_convs.iter().zip(&self.scl_acts) {
            let z = conv.forward(&h)?;
            h = act.forward(&z);
            if let Some(t) = tape.as_deref_mut() {
                t.scl_z.push(z);
            }
        }
        let mut it = levels.into_iter();
        Ok(FeaturePyramid {
            f1: it.next().expect("f1"),
            f2: it.next().expect("f2"),
            f3: it.next().expect("f3"),
            f4: h,
        })
    }

    fn decode_impl(
        &self,
        p: &FeaturePyramid<T>,
        mut tape: Option<&mut GeneratorTape<T>>,
    ) -> Result<Tensor<T>> {
        let b = self.cfg.base_channels;
        let lv = p.levels();
        for (i, f) in lv.iter().enumerate() {
            ensure_shape!(
                f.channels() == b,
                "pyramid level f{} has {} channels, expected {b}",
                i + 1,
                f.channels()
            );
            if i > 0 {
                ensure_shape!(
                    f.height() * 2 == lv[i - 1].height() && f.width() * 2 == lv[i - 1].width(),
                    "pyramid level f{} is {}x{}, expected half of f{}",
                    i + 1,
                    f.height(),
                    f.width(),
                    i
                );
            }
        }
        let mut deep = p.f4.clone();
        for (rdm, skip) in self.rdms.iter().zip([&p.f3, &p.f2, &p.f1]) {
            let cat = nn::concat(&nn::upsample_nearest2(&deep), skip)?;
            deep = if let Some(t) = tape.as_deref_mut() {
                let (a, ta) = rdm.first.forward_train(&cat)?;
                let (b, tb) = rdm.second.forward_train(&a)?;
                t.rdms.push((ta, tb));
                b
            } else {
                rdm.second.forward(&rdm.first.forward(&cat)?)?
            };
        }
        let s = self.srr_conv.forward(&deep)?;
        let shuffled = nn::pixel_shuffle(&s, self.cfg.upscale)?;
        let out = nn::tanh(&self.out_conv.forward(&shuffled)?);
        if let Some(t) = tape {
            t.fused = deep;
            t.shuffled = shuffled;
            t.output = out.clone();
        }
        Ok(out)
    }

    /// Accumulate parameter gradients given `d loss / d output`.
    pub fn backward(&mut self, tape: &GeneratorTape<T>, gout: &Tensor<T>) -> Result<()> {
        ensure_shape!(
            gout.same_shape(&tape.output),
            "generator grad {:?} vs output {:?}",
            gout.shape(),
            tape.output.shape()
        );
        let b = self.cfg.base_channels;
        let g = nn::tanh_backward(&tape.output, gout);
        let g = self
            .out_conv
            .backward(&tape.shuffled, &g, true, true)?
            .expect("grad");
        let g = nn::pixel_unshuffle(&g, self.cfg.upscale)?;
        let mut g = self
            .srr_conv
            .backward(&tape.fused, &g, true, true)?
            .expect("grad");

        // Decoder, deepest module last in the forward pass, so walk backwards.
        let mut skip_grads = Vec::with_capacity(3);
        for (rdm, (ta, tb)) in self.rdms.iter_mut().zip(&tape.rdms).rev() {
            let ga = rdm.second.backward(tb, &g)?;
            let gcat = rdm.first.backward(ta, &ga)?;
            let (gup, gskip) = nn::split_channels(&gcat, b);
            skip_grads.push(gskip);
            g = nn::upsample_nearest2_backward(&gup);
        }
        // skip_grads is now [f1, f2, f3]; g is d/d f4.
        for i in (0..self.scl_convs.len()).rev() {
            g = self.scl_acts[i].backward(&tape.scl_z[i], &g);
            let input = if i == 0 {
                tape.scl_in.clone()
            } else {
                self.scl_acts[i - 1].forward(&tape.scl_z[i - 1])
            };
            g = self.scl_convs[i]
                .backward(&input, &g, true, true)?
                .expect("grad");
        }
        for (r, (rem, (ta, tb))) in self.rems.iter_mut().zip(&tape.rems).enumerate().rev() {
            let gp = nn::avg_pool2_backward(&g);
            let ga = rem.second.backward(tb, &gp)?;
            g = rem.first.backward(ta, &ga)?;
            // g is now d/d f_{r+1}; add the decoder's skip contribution.
            g.add_assign(&skip_grads[r])?;
        }
        let g = self.pre_act.backward(&tape.pre_z, &g);
        self.pre_conv.backward(&tape.input, &g, false, true)?;
        Ok(())
    }
}

impl<T: Scalar> Parameters<T> for Generator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "pre.conv.weight"), &self.pre_conv.weight);
        f(&join(prefix, "pre.conv.bias"), &self.pre_conv.bias);
        f(&join(prefix, "pre.act.slope"), &self.pre_act.slope);
        for (i, r) in self.rems.iter().enumerate() {
            r.visit(&join(prefix, &format!("enc.rem{i}")), f);
        }
        for (i, (c, a)) in self.scl_convs.iter().zip(&self.scl_acts).enumerate() {
            f(&join(prefix, &format!("enc.scl.conv{i}.weight")), &c.weight);
            f(&join(prefix, &format!("enc.scl.conv{i}.bias")), &c.bias);
            f(&join(prefix, &format!("enc.scl.act{i}.slope")), &a.slope);
        }
        for (i, r) in self.rdms.iter().enumerate() {
            r.visit(&join(prefix, &format!("dec.rdm{i}")), f);
        }
        f(&join(prefix, "srr.conv.weight"), &self.srr_conv.weight);
        f(&join(prefix, "srr.conv.bias"), &self.srr_conv.bias);
        f(&join(prefix, "srr.out.weight"), &self.out_conv.weight);
        f(&join(prefix, "srr.out.bias"), &self.out_conv.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "pre.conv.weight"), &mut self.pre_conv.weight);
        f(&join(prefix, "pre.conv.bias"), &mut self.pre_conv.bias);
        f(&join(prefix, "pre.act.slope"), &mut self.pre_act.slope);
        for (i, r) in self.rems.iter_mut().enumerate() {
            r.visit_mut(&join(prefix, &format!("enc.rem{i}")), f);
        }
        for (i, (c, a)) in self
            .scl_convs
            .iter_mut()
            .zip(self.scl_acts.iter_mut())
            .enumerate()
        {
            f(
                &join(prefix, &format!("enc.scl.conv{i}.weight")),
                &mut c.weight,
            );
            f(&join(prefix, &format!("enc.scl.conv{i}.bias")), &mut c.bias);
            f(
                &join(prefix, &format!("enc.scl.act{i}.slope")),
                &mut a.slope,
            );
        }
        for (i, r) in self.rdms.iter_mut().enumerate() {
            r.visit_mut(&join(prefix, &format!("dec.rdm{i}")), f);
        }
        f(&join(prefix, "srr.conv.weight"), &mut self.srr_conv.weight);
        f(&join(prefix, "srr.conv.bias"), &mut self.srr_conv.bias);
        f(&join(prefix, "srr.out.weight"), &mut self.out_conv.weight);
        f(&join(prefix, "srr.out.bias"), &mut self.out_conv.bias);
    }
}

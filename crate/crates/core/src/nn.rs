//! Neural network layers with explicit backward passes.
//!
//! Layers are stateless with respect to activations: `forward` returns the
//! output and callers keep whatever the matching `backward` needs. Gradients
//! with respect to parameters accumulate into [`Param::grad`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Result};
use crate::par;
use crate::tensor::{Scalar, Tensor};

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Param { shape, value, grad }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn uniform<R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        Self::new(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Visitor over named parameters, in a fixed order.
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Geometry of a 2-D convolution; `pad` is always `kernel / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        ConvShape {
            cin,
            cout,
            kernel,
            stride,
        }
    }

    #[inline]
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Rows of the unfolded patch matrix.
    #[inline]
    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    pub fn num_params(&self) -> usize {
        self.cout * self.patch_len() + self.cout
    }

    /// Multiply-accumulates counted as two operations.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_hw(h, w);
        2 * (ho * wo) as u64 * self.cout as u64 * self.patch_len() as u64
    }
}

/// Columns per unfolded tile, sized so one tile stays cache-resident.
fn tile_cols(patch_len: usize, cols: usize) -> usize {
    let t = ((1usize << 18) / patch_len.max(1)).clamp(256, 4096);
    let t = t / 16 * 16;
    t.min(cols).max(1)
}

/// Tiles processed per parallel wave. Fixed, so that accumulation order does
/// not depend on the thread count.
const TILE_WAVE: usize = 8;

/// 2-D convolution, zero padding `kernel / 2`, with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub shape: ConvShape,
    /// `[cout, cin * k * k]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    pub fn new<R: Rng>(shape: ConvShape, rng: &mut R) -> Self {
        let fan_in = shape.patch_len();
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            shape,
            weight: Param::uniform(vec![shape.cout, fan_in], bound, rng),
            bias: Param::uniform(vec![shape.cout], bound, rng),
        }
    }

    pub fn zeroed(shape: ConvShape) -> Self {
        Conv2d {
            shape,
            weight: Param::zeros(vec![shape.cout, shape.patch_len()]),
            bias: Param::zeros(vec![shape.cout]),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        ensure_shape!(
            x.channels() == self.shape.cin,
            "conv expects {} input channels, got {}",
            self.shape.cin,
            x.channels()
        );
        ensure_shape!(
            x.height() + 2 * self.shape.pad() >= self.shape.kernel
                && x.width() + 2 * self.shape.pad() >= self.shape.kernel,
            "input {}x{} smaller than kernel",
            x.height(),
            x.width()
        );
        Ok(())
    }

    fn is_pointwise(&self) -> bool {
        self.shape.kernel == 1 && self.shape.stride == 1
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let s = self.shape;
        let (ho, wo) = s.out_hw(x.height(), x.width());
        let cols = ho * wo;
        let kk = s.patch_len();
        let tile = tile_cols(kk, cols);
        let ntiles = cols.div_ceil(tile);
        let mut out = Tensor::zeros(s.cout, ho, wo);

        let mut first = 0;
        while first < ntiles {
            let count = TILE_WAVE.min(ntiles - first);
            let results = par::map_indexed(count, |i| {
                let j0 = (first + i) * tile;
                let j1 = (j0 + tile).min(cols);
                let t = j1 - j0;
                let mut buf = vec![T::zero(); s.cout * t];
                for co in 0..s.cout {
                    buf[co * t..(co + 1) * t].fill(self.bias.value[co]);
                }
                if self.is_pointwise() {
                    T::gemm(
                        s.cout,
                        kk,
                        t,
                        T::one(),
                        &self.weight.value,
                        kk,
                        1,
                        &x.data()[j0..],
                        cols,
                        1,
                        T::one(),
                        &mut buf,
                        t,
                        1,
                    );
                } else {
                    let col = im2col_tile(x, &s, wo, j0, j1);
                    T::gemm(
                        s.cout,
                        kk,
                        t,
                        T::one(),
                        &self.weight.value,
                        kk,
                        1,
                        &col,
                        t,
                        1,
                        T::one(),
                        &mut buf,
                        t,
                        1,
                    );
                }
                (j0, t, buf)
            });
            let od = out.data_mut();
            for (j0, t, buf) in results {
                for co in 0..s.cout {
                    od[co * cols + j0..co * cols + j0 + t]
                        .copy_from_slice(&buf[co * t..(co + 1) * t]);
                }
            }
            first += count;
        }
        Ok(out)
    }

    /// Accumulates parameter gradients (when `weight_grads`) and returns the
    /// gradient with respect to `x` (when `input_grad`).
    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        gout: &Tensor<T>,
        input_grad: bool,
        weight_grads: bool,
    ) -> Result<Option<Tensor<T>>> {
        self.check_input(x)?;
        let s = self.shape;
        let (ho, wo) = s.out_hw(x.height(), x.width());
        ensure_shape!(
            gout.shape() == (s.cout, ho, wo),
            "conv grad {:?} does not match output {:?}",
            gout.shape(),
            (s.cout, ho, wo)
        );
        let cols = ho * wo;
        let kk = s.patch_len();
        let tile = tile_cols(kk, cols);
        let ntiles = cols.div_ceil(tile);
        let mut gin = input_grad.then(|| Tensor::zeros(s.cin, x.height(), x.width()));
        let g = gout.data();

        let mut first = 0;
        while first < ntiles {
            let count = TILE_WAVE.min(ntiles - first);
            let weight = &self.weight.value;
            let results = par::map_indexed(count, |i| {
                let j0 = (first + i) * tile;
                let j1 = (j0 + tile).min(cols);
                let t = j1 - j0;
                let gtile = &g[j0..];
                let mut gw = None;
                if weight_grads {
                    let mut pw = vec![T::zero(); s.cout * kk];
                    if self.is_pointwise() {
                        T::gemm(
                            s.cout,
                            t,
                            kk,
                            T::one(),
                            gtile,
                            cols,
                            1,
                            &x.data()[j0..],
                            1,
                            cols,
                            T::zero(),
                            &mut pw,
                            kk,
                            1,
                        );
                    } else {
                        let col = im2col_tile(x, &s, wo, j0, j1);
                        T::gemm(
                            s.cout,
                            t,
                            kk,
                            T::one(),
                            gtile,
                            cols,
                            1,
                            &col,
                            1,
                            t,
                            T::zero(),
                            &mut pw,
                            kk,
                            1,
                        );
                    }
                    let pb: Vec<T> = (0..s.cout)
                        .map(|co| g[co * cols + j0..co * cols + j1].iter().copied().sum())
                        .collect();
                    gw = Some((pw, pb));
                }
                let gcol = input_grad.then(|| {
                    let mut gc = vec![T::zero(); kk * t];
                    T::gemm(
                        kk,
                        s.cout,
                        t,
                        T::one(),
                        weight,
                        1,
                        kk,
                        gtile,
                        cols,
                        1,
                        T::zero(),
                        &mut gc,
                        t,
                        1,
                    );
                    gc
                });
                (j0, j1, gw, gcol)
            });
            for (j0, j1, gw, gcol) in results {
                if let Some((pw, pb)) = gw {
                    for (a, b) in self.weight.grad.iter_mut().zip(&pw) {
                        *a += *b;
                    }
                    for (a, b) in self.bias.grad.iter_mut().zip(&pb) {
                        *a += *b;
                    }
                }
                if let (Some(gc), Some(gi)) = (gcol, gin.as_mut()) {
                    col2im_tile(&gc, gi, &s, wo, j0, j1);
                }
            }
            first += count;
        }
        Ok(gin)
    }
}

/// Unfold output columns `[j0, j1)` into a `[cin*k*k, j1-j0]` patch matrix.
fn im2col_tile<T: Scalar>(x: &Tensor<T>, s: &ConvShape, wo: usize, j0: usize, j1: usize) -> Vec<T> {
    let t = j1 - j0;
    let (h, w) = (x.height() as isize, x.width() as isize);
    let k = s.kernel;
    let p = s.pad() as isize;
    let st = s.stride as isize;
    let mut col = vec![T::zero(); s.patch_len() * t];
    for ci in 0..s.cin {
        let plane = x.channel(ci);
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &mut col[r * t..(r + 1) * t];
                let mut j = j0;
                while j < j1 {
                    let oy = j / wo;
                    let ox0 = j % wo;
                    let ox1 = (wo).min(ox0 + (j1 - j));
                    let iy = oy as isize * st - p + ky as isize;
                    let dst = &mut row[j - j0..j - j0 + (ox1 - ox0)];
                    if iy >= 0 && iy < h {
                        let src = &plane[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                        for (d, ox) in dst.iter_mut().zip(ox0..ox1) {
                            let ix = ox as isize * st - p + kx as isize;
                            if ix >= 0 && ix < w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                    j += ox1 - ox0;
                }
            }
        }
    }
    col
}

/// Scatter-add a patch-matrix gradient tile back onto the input gradient.
fn col2im_tile<T: Scalar>(
    gcol: &[T],
    gin: &mut Tensor<T>,
    s: &ConvShape,
    wo: usize,
    j0: usize,
    j1: usize,
) {
    let t = j1 - j0;
    let (h, w) = (gin.height() as isize, gin.width() as isize);
    let k = s.kernel;
    let p = s.pad() as isize;
    let st = s.stride as isize;
    for ci in 0..s.cin {
        let plane = gin.channel_mut(ci);
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &gcol[r * t..(r + 1) * t];
                let mut j = j0;
                while j < j1 {
                    let oy = j / wo;
                    let ox0 = j % wo;
                    let ox1 = wo.min(ox0 + (j1 - j));
                    let iy = oy as isize * st - p + ky as isize;
                    if iy >= 0 && iy < h {
                        let dst =
                            &mut plane[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                        for (&g, ox) in row[j - j0..j - j0 + (ox1 - ox0)].iter().zip(ox0..ox1) {
                            let ix = ox as isize * st - p + kx as isize;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                    j += ox1 - ox0;
                }
            }
        }
    }
}

/// Parametric ReLU with one shared learnable slope (initialised to 0.25).
#[derive(Clone, Debug, PartialEq)]
pub struct Prelu<T> {
    pub slope: Param<T>,
}

impl<T: Scalar> Default for Prelu<T> {
    fn default() -> Self {
        Prelu {
            slope: Param::new(vec![1], vec![T::of(0.25)]),
        }
    }
}

impl<T: Scalar> Prelu<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let a = self.slope.value[0];
        let mut y = x.clone();
        par::for_each_chunk_mut(y.data_mut(), par::POINTWISE_CHUNK, |_, c| {
            for v in c {
                if *v <= T::zero() {
                    *v *= a;
                }
            }
        });
        y
    }

    /// `x` is the layer input (pre-activation).
    pub fn backward(&mut self, x: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
        let a = self.slope.value[0];
        let mut gin = gout.clone();
        let xd = x.data();
        par::for_each_chunk_mut(gin.data_mut(), par::POINTWISE_CHUNK, |ci, c| {
            let off = ci * par::POINTWISE_CHUNK;
            for (g, &xv) in c.iter_mut().zip(&xd[off..]) {
                if xv <= T::zero() {
                    *g *= a;
                }
            }
        });
        // Chunked partial sums keep the reduction order fixed.
        let n = xd.len().div_ceil(par::POINTWISE_CHUNK);
        let gd = gout.data();
        let partial = par::map_indexed(n, |ci| {
            let lo = ci * par::POINTWISE_CHUNK;
            let hi = (lo + par::POINTWISE_CHUNK).min(xd.len());
            let mut acc = T::zero();
            for i in lo..hi {
                if xd[i] <= T::zero() {
                    acc += gd[i] * xd[i];
                }
            }
            acc
        });
        self.slope.grad[0] += partial.into_iter().fold(T::zero(), |a, b| a + b);
        gin
    }
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let a = T::of(slope);
    let mut y = x.clone();
    par::for_each_chunk_mut(y.data_mut(), par::POINTWISE_CHUNK, |_, c| {
        for v in c {
            if *v < T::zero() {
                *v *= a;
            }
        }
    });
    y
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, gout: &Tensor<T>, slope: f64) -> Tensor<T> {
    let a = T::of(slope);
    let mut g = gout.clone();
    let xd = x.data();
    par::for_each_chunk_mut(g.data_mut(), par::POINTWISE_CHUNK, |ci, c| {
        let off = ci * par::POINTWISE_CHUNK;
        for (gv, &xv) in c.iter_mut().zip(&xd[off..]) {
            if xv < T::zero() {
                *gv *= a;
            }
        }
    });
    g
}

/// 2x2 average pooling, stride 2.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.shape();
    ensure_shape!(
        h % 2 == 0 && w % 2 == 0,
        "avg_pool2 needs even dims, got {h}x{w}"
    );
    let q = T::of(0.25);
    Ok(Tensor::from_fn(c, h / 2, w / 2, |ci, y, xx| {
        (x.at(ci, 2 * y, 2 * xx)
            + x.at(ci, 2 * y, 2 * xx + 1)
            + x.at(ci, 2 * y + 1, 2 * xx)
            + x.at(ci, 2 * y + 1, 2 * xx + 1))
            * q
    }))
}

pub fn avg_pool2_backward<T: Scalar>(gout: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = gout.shape();
    let q = T::of(0.25);
    Tensor::from_fn(c, 2 * h, 2 * w, |ci, y, x| gout.at(ci, y / 2, x / 2) * q)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    Tensor::from_fn(c, 2 * h, 2 * w, |ci, y, xx| x.at(ci, y / 2, xx / 2))
}

pub fn upsample_nearest2_backward<T: Scalar>(gout: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = gout.shape();
    Tensor::from_fn(c, h / 2, w / 2, |ci, y, x| {
        gout.at(ci, 2 * y, 2 * x)
            + gout.at(ci, 2 * y, 2 * x + 1)
            + gout.at(ci, 2 * y + 1, 2 * x)
            + gout.at(ci, 2 * y + 1, 2 * x + 1)
    })
}

/// Channel concatenation `[a; b]`.
pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_shape!(
        a.height() == b.height() && a.width() == b.width(),
        "concat spatial mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(a.channels() + b.channels(), a.height(), a.width(), data)
}

/// Split a concatenated gradient back into the first `ca` channels and the rest.
pub fn split_channels<T: Scalar>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    (
        g.channel_range(0, ca),
        g.channel_range(ca, g.channels() - ca),
    )
}

/// Sub-pixel rearrangement `(C*r*r, H, W) -> (C, H*r, W*r)`.
///
/// Input channel `c*r*r + i*r + j` lands at sub-pixel offset `(i, j)`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (cin, h, w) = x.shape();
    ensure_shape!(
        r > 0 && cin % (r * r) == 0,
        "pixel_shuffle: {cin} channels not divisible by {}",
        r * r
    );
    let c = cin / (r * r);
    Ok(Tensor::from_fn(c, h * r, w * r, |ci, y, xx| {
        x.at(ci * r * r + (y % r) * r + (xx % r), y / r, xx / r)
    }))
}

/// Inverse of [`pixel_shuffle`]; also its backward pass.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (c, hr, wr) = x.shape();
    ensure_shape!(
        r > 0 && hr % r == 0 && wr % r == 0,
        "pixel_unshuffle: {hr}x{wr} not divisible by {r}"
    );
    Ok(Tensor::from_fn(c * r * r, hr / r, wr / r, |cc, y, xx| {
        let ci = cc / (r * r);
        let sub = cc % (r * r);
        x.at(ci, y * r + sub / r, xx * r + sub % r)
    }))
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    par::for_each_chunk_mut(y.data_mut(), par::POINTWISE_CHUNK, |_, c| {
        for v in c {
            *v = v.tanh();
        }
    });
    y
}

/// Backward through tanh given its output `y`.
pub fn tanh_backward<T: Scalar>(y: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let mut g = gout.clone();
    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
        *gv *= T::one() - yv * yv;
    }
    g
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let n = T::of(x.plane_len() as f64);
    (0..x.channels())
        .map(|c| x.channel(c).iter().copied().sum::<T>() / n)
        .collect()
}

pub fn global_avg_pool_backward<T: Scalar>(g: &[T], h: usize, w: usize) -> Tensor<T> {
    let n = T::of((h * w) as f64);
    Tensor::from_fn(g.len(), h, w, |c, _, _| g[c] / n)
}

/// Fully connected layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs, inputs]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Linear {
            inputs,
            outputs,
            weight: Param::uniform(vec![outputs, inputs], bound, rng),
            bias: Param::uniform(vec![outputs], bound, rng),
        }
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        ensure_shape!(
            x.len() == self.inputs,
            "linear expects {} inputs, got {}",
            self.inputs,
            x.len()
        );
        Ok((0..self.outputs)
            .map(|o| {
                let row = &self.weight.value[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>() + self.bias.value[o]
            })
            .collect())
    }

    pub fn backward(&mut self, x: &[T], gout: &[T], weight_grads: bool) -> Vec<T> {
        let mut gin = vec![T::zero(); self.inputs];
        for (o, &g) in gout.iter().enumerate() {
            let row = o * self.inputs;
            for i in 0..self.inputs {
                gin[i] += self.weight.value[row + i] * g;
                if weight_grads {
                    self.weight.grad[row + i] += g * x[i];
                }
            }
            if weight_grads {
                self.bias.grad[o] += g;
            }
        }
        gin
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

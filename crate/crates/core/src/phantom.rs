//! Synthetic focal stacks of stained cells with depth-dependent defocus,
//! and the LR degradation applied to their in-focus plane.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::derive_seed;
use crate::error::{ensure_shape, Error, Result};
use crate::par;
use crate::stack_io::{
    self, normalize_image, plane_depths, quantize, FocalStack, Manifest, SampleRecord, Split,
    CREATED_BY,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub canvas_size: usize,
    pub num_planes: usize,
    pub plane_spacing_um: f64,
    pub num_objects: usize,
    pub object_depth_range_um: (f64, f64),
    /// Blur sigma in pixels per micrometre of defocus.
    pub defocus_rate: f64,
    pub background_color: [u8; 3],
    /// Cytoplasm semi-axis range in pixels.
    pub cell_radius_px: (f64, f64),
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            canvas_size: 768,
            num_planes: 11,
            plane_spacing_um: 2.7,
            num_objects: 72,
            object_depth_range_um: (-13.5, 13.5),
            defocus_rate: 0.3,
            background_color: [236, 230, 240],
            cell_radius_px: (14.0, 36.0),
            rng_seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Change the canvas, keeping the object density of `self`.
    pub fn with_canvas(mut self, canvas_size: usize) -> Self {
        let area =
            (canvas_size * canvas_size) as f64 / (self.canvas_size * self.canvas_size) as f64;
        if self.num_objects > 0 {
            self.num_objects = ((self.num_objects as f64 * area).round() as usize).max(1);
        }
        self.canvas_size = canvas_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("phantom: {m}")));
        if self.num_planes == 0 || self.num_planes.is_multiple_of(2) {
            return bad(format!("num_planes must be odd, got {}", self.num_planes));
        }
        if self.canvas_size < 8 || !self.canvas_size.is_multiple_of(8) {
            return bad(format!(
                "canvas_size must be a positive multiple of 8, got {}",
                self.canvas_size
            ));
        }
        if !(self.plane_spacing_um > 0.0) {
            return bad("plane_spacing_um must be positive".into());
        }
        if !(self.defocus_rate > 0.0) || !self.defocus_rate.is_finite() {
            return bad("defocus_rate must be positive".into());
        }
        let (lo, hi) = self.object_depth_range_um;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return bad(format!("invalid depth range ({lo}, {hi})"));
        }
        let (rlo, rhi) = self.cell_radius_px;
        if !(rlo > 1.0 && rlo <= rhi && rhi.is_finite()) {
            return bad(format!("invalid cell radius range ({rlo}, {rhi})"));
        }
        Ok(())
    }

    pub fn plane_depths(&self) -> Vec<f64> {
        plane_depths(self.num_planes, self.plane_spacing_um)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// An elliptical stained cell with a nucleus and granules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub cx: f64,
    pub cy: f64,
    pub depth_um: f64,
    pub radii: (f64, f64),
    pub angle: f64,
    pub nucleus_offset: (f64, f64),
    pub nucleus_radii: (f64, f64),
    /// Per-channel absorbance of cytoplasm and nucleus.
    pub cytoplasm_absorbance: [f64; 3],
    pub nucleus_absorbance: [f64; 3],
    /// `(dx, dy, radius, absorbance)` relative to the centre, in the cell frame.
    pub granules: Vec<(f64, f64, f64, f64)>,
}

impl Cell {
    pub fn random<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> Cell {
        let n = spec.canvas_size as f64;
        let (rlo, rhi) = spec.cell_radius_px;
        let (dlo, dhi) = spec.object_depth_range_um;
        let a = rng.gen_range(rlo..=rhi);
        let b = a * rng.gen_range(0.6..=1.0);
        let na = a * rng.gen_range(0.25..=0.45);
        let nb = na * rng.gen_range(0.7..=1.0);
        let off = (a - na) * 0.5;
        let cyto = rng.gen_range(0.6..=1.2);
        let nuc = rng.gen_range(0.8..=1.4);
        let granules = (0..rng.gen_range(3..=9))
            .map(|_| {
                let t = rng.gen_range(0.0..2.0 * PI);
                let r = rng.gen_range(0.3..=0.85);
                (
                    r * a * t.cos(),
                    r * b * t.sin(),
                    rng.gen_range(1.2..=2.8),
                    rng.gen_range(0.3..=0.8),
                )
            })
            .collect();
        Cell {
            cx: rng.gen_range(0.0..n),
            cy: rng.gen_range(0.0..n),
            depth_um: if dlo == dhi {
                dlo
            } else {
                rng.gen_range(dlo..=dhi)
            },
            radii: (a, b),
            angle: rng.gen_range(0.0..PI),
            nucleus_offset: (rng.gen_range(-off..=off), rng.gen_range(-off..=off) * b / a),
            nucleus_radii: (na, nb),
            cytoplasm_absorbance: [0.22 * cyto, 0.42 * cyto, 0.18 * cyto],
            nucleus_absorbance: [0.85 * nuc, 1.05 * nuc, 0.45 * nuc],
            granules,
        }
    }

    fn frame(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Absorbance at pixel centre `(x, y)`.
    fn absorbance(&self, x: f64, y: f64) -> [f64; 3] {
        let (u, v) = self.frame(x, y);
        let cov = ellipse_coverage(u, v, self.radii.0, self.radii.1);
        let mut out = [0.0; 3];
        if cov == 0.0 {
            return out;
        }
        let (nu, nv) = (u - self.nucleus_offset.0, v - self.nucleus_offset.1);
        let ncov = ellipse_coverage(nu, nv, self.nucleus_radii.0, self.nucleus_radii.1);
        let mut g = 0.0;
        for &(gx, gy, r, k) in &self.granules {
            g += k * ellipse_coverage(u - gx, v - gy, r, r);
        }
        for (ch, o) in out.iter_mut().enumerate() {
            *o = cov * self.cytoplasm_absorbance[ch] * (1.0 + g)
                + ncov * self.nucleus_absorbance[ch];
        }
        out
    }

    fn extent(&self) -> f64 {
        self.radii.0.max(self.radii.1) + 1.0
    }
}

/// Antialiased inside-fraction of an axis-aligned ellipse.
fn ellipse_coverage(u: f64, v: f64, a: f64, b: f64) -> f64 {
    let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
    (0.5 - (rho - 1.0) * (a * b).sqrt()).clamp(0.0, 1.0)
}

/// Normalised 1D Gaussian taps of radius `ceil(3 sigma)`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Zero-padded separable blur of a `w x h` single-channel buffer.
fn blur_zero(buf: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma < 1e-3 {
        return buf.to_vec();
    }
    let k = gaussian_taps(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; buf.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = x as isize + j as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * buf[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; buf.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = y as isize + j as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Render one focal plane at `depth` as storage-range intensities.
fn render_plane(spec: &PhantomSpec, cells: &[Cell], depth: f64) -> Tensor<f32> {
    let n = spec.canvas_size;
    let mut absorb = vec![0.0f64; 3 * n * n];
    for cell in cells {
        let sigma = spec.defocus_rate * (cell.depth_um - depth).abs();
        let margin = cell.extent() + (3.0 * sigma).ceil() + 2.0;
        let x0 = (cell.cx - margin).floor() as isize;
        let y0 = (cell.cy - margin).floor() as isize;
        let side = (2.0 * margin).ceil() as usize + 1;
        let mut local = vec![vec![0.0f64; side * side]; 3];
        for ly in 0..side {
            for lx in 0..side {
                let px = (x0 + lx as isize) as f64 + 0.5;
                let py = (y0 + ly as isize) as f64 + 0.5;
                let a = cell.absorbance(px, py);
                for ch in 0..3 {
                    local[ch][ly * side + lx] = a[ch];
                }
            }
        }
        for (ch, buf) in local.iter().enumerate() {
            let blurred = blur_zero(buf, side, side, sigma);
            for ly in 0..side {
                let y = y0 + ly as isize;
                if y < 0 || y as usize >= n {
                    continue;
                }
                for lx in 0..side {
                    let x = x0 + lx as isize;
                    if x < 0 || x as usize >= n {
                        continue;
                    }
                    absorb[ch * n * n + y as usize * n + x as usize] += blurred[ly * side + lx];
                }
            }
        }
    }
    let bg = spec.background_color;
    Tensor::from_fn(3, n, n, |c, y, x| {
        let v = bg[c] as f64 * (-absorb[c * n * n + y * n + x]).exp();
        quantize(stack_io::normalize(v as f32)) as f32
    })
}

/// Cells of the scene described by `spec`.
pub fn sample_cells(spec: &PhantomSpec) -> Vec<Cell> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    (0..spec.num_objects)
        .map(|_| Cell::random(spec, &mut rng))
        .collect()
}

/// Render `cells` into an 8-bit-exact focal stack.
pub fn render_cells(spec: &PhantomSpec, cells: &[Cell]) -> Result<FocalStack> {
    spec.validate()?;
    let depths = spec.plane_depths();
    let planes = par::map_indexed(depths.len(), |k| {
        normalize_image(&render_plane(spec, cells, depths[k]))
    });
    FocalStack::from_planes(&planes, depths)
}

pub fn render_stack(spec: &PhantomSpec) -> Result<FocalStack> {
    spec.validate()?;
    render_cells(spec, &sample_cells(spec))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationSpec {
    pub downscale_factor: usize,
    pub blur_window: usize,
    pub blur_sigma: f64,
    pub normalize_range: (f64, f64),
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec {
            downscale_factor: 2,
            blur_window: 5,
            blur_sigma: 3.0,
            normalize_range: (-1.0, 1.0),
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.downscale_factor != 2 {
            return Err(Error::Config(format!(
                "degradation: only a downscale factor of 2 is supported, got {}",
                self.downscale_factor
            )));
        }
        if self.blur_window == 0 || self.blur_window.is_multiple_of(2) || !(self.blur_sigma > 0.0) {
            return Err(Error::Config(
                "degradation: blur window must be odd and sigma positive".into(),
            ));
        }
        if self.normalize_range != (-1.0, 1.0) {
            return Err(Error::Config(
                "degradation: inputs are normalised to [-1, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Normalised `window x window` Gaussian, row-major.
pub fn gaussian_kernel_2d(window: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel_1d(window, sigma);
    k.iter()
        .flat_map(|a| k.iter().map(move |b| a * b))
        .collect()
}

fn gaussian_kernel_1d(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as f64;
    let k: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mirror an index into `0..n` without repeating the edge sample.
fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(img: &Tensor<f64>, window: usize, sigma: f64) -> Tensor<f64> {
    let k = gaussian_kernel_1d(window, sigma);
    let r = (window / 2) as isize;
    let (c, h, w) = img.shape();
    let mut tmp = Tensor::<f64>::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    s += kv * img.at(ch, y, reflect101(x as isize + j as isize - r, w));
                }
                *tmp.at_mut(ch, y, x) = s;
            }
        }
    }
    let mut out = Tensor::<f64>::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    s += kv * tmp.at(ch, reflect101(y as isize + j as isize - r, h), x);
                }
                *out.at_mut(ch, y, x) = s;
            }
        }
    }
    out
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Antialiased resampling weights `(first index, weights)` per output sample.
fn resample_weights(in_size: usize, out_size: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = in_size as f64 / out_size as f64;
    let fscale = scale.max(1.0);
    let support = 2.0 * fscale;
    (0..out_size)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support + 0.5).floor().max(0.0)) as usize;
            let hi = ((center + support + 0.5).floor() as usize).min(in_size);
            let mut w: Vec<f64> = (lo..hi)
                .map(|x| cubic((x as f64 - center + 0.5) / fscale))
                .collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            (lo, w)
        })
        .collect()
}

/// Bicubic resize (Keys a = -0.5) with antialiasing when shrinking.
pub fn resize_bicubic(img: &Tensor<f64>, out_h: usize, out_w: usize) -> Tensor<f64> {
    let (c, h, w) = img.shape();
    let wx = resample_weights(w, out_w);
    let wy = resample_weights(h, out_h);
    let mut tmp = Tensor::<f64>::zeros(c, h, out_w);
    for ch in 0..c {
        for y in 0..h {
            for (x, (lo, ws)) in wx.iter().enumerate() {
                *tmp.at_mut(ch, y, x) = ws
                    .iter()
                    .enumerate()
                    .map(|(j, k)| k * img.at(ch, y, lo + j))
                    .sum();
            }
        }
    }
    let mut out = Tensor::<f64>::zeros(c, out_h, out_w);
    for ch in 0..c {
        for (y, (lo, ws)) in wy.iter().enumerate() {
            for x in 0..out_w {
                *out.at_mut(ch, y, x) = ws
                    .iter()
                    .enumerate()
                    .map(|(j, k)| k * tmp.at(ch, lo + j, x))
                    .sum();
            }
        }
    }
    out
}

/// Bicubic halving with clamping to the storage range.
pub fn downscale(img: &Tensor<f64>, factor: usize) -> Result<Tensor<f64>> {
    let (_, h, w) = img.shape();
    ensure_shape!(
        h % factor == 0 && w % factor == 0 && h > 0 && w > 0,
        "{h}x{w} image is not divisible by {factor}"
    );
    Ok(resize_bicubic(img, h / factor, w / factor).map(|v| v.clamp(0.0, 255.0)))
}

/// Storage-range HR image to normalised LR input: bicubic downscale, blur,
/// then map to `[-1, 1]`.
pub fn degrade(hr: &Tensor<f32>, spec: &DegradationSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    let small = downscale(&hr.cast::<f64>(), spec.downscale_factor)?;
    let blurred = gaussian_blur(&small, spec.blur_window, spec.blur_sigma);
    Ok(blurred.map(|v| v / 127.5 - 1.0).cast::<f32>())
}

/// Bicubic upscale of a normalised LR image back to HR size; the baseline
/// every model is compared against.
pub fn bicubic_upscale(lr: &Tensor<f32>, factor: usize) -> Tensor<f32> {
    let storage = lr.cast::<f64>().map(|v| (v + 1.0) * 127.5);
    let (_, h, w) = storage.shape();
    resize_bicubic(&storage, h * factor, w * factor)
        .map(|v| v.clamp(0.0, 255.0) / 127.5 - 1.0)
        .cast::<f32>()
}

/// One synthetic `(normalised LR input, HR stack)` pair.
pub fn synthesize_sample(
    spec: &PhantomSpec,
    degradation: &DegradationSpec,
) -> Result<(Tensor<f32>, FocalStack)> {
    let stack = render_stack(spec)?;
    let lr = degrade(
        &stack.storage_plane(stack.middle_plane_index()),
        degradation,
    )?;
    Ok((lr, stack))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Sample `i` belongs to slide `i % total`; slides below `train` train.
    Slides { total: usize, train: usize },
    /// The first `train` samples train, the rest test.
    Explicit { train: usize },
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy::Slides { total: 5, train: 3 }
    }
}

impl SplitPolicy {
    /// `(split, slide)` of sample `i`.
    pub fn assign(&self, i: usize) -> (Split, usize) {
        match *self {
            SplitPolicy::Slides { total, train } => {
                let slide = i % total;
                (
                    if slide < train {
                        Split::Train
                    } else {
                        Split::Test
                    },
                    slide,
                )
            }
            SplitPolicy::Explicit { train } => {
                (if i < train { Split::Train } else { Split::Test }, i)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            SplitPolicy::Slides { total, train } if total == 0 || train > total => Err(
                Error::Config(format!("split: {train} training slides out of {total}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Per-sample scene spec: same parameters, independent seed stream.
pub fn sample_spec(spec: &PhantomSpec, index: usize) -> PhantomSpec {
    PhantomSpec {
        rng_seed: derive_seed(spec.rng_seed, index as u64),
        ..spec.clone()
    }
}

/// Write `n_samples` synthetic pairs and a manifest under `out_dir`.
pub fn make_dataset(
    n_samples: usize,
    spec: &PhantomSpec,
    degradation: &DegradationSpec,
    split: SplitPolicy,
    out_dir: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    degradation.validate()?;
    split.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let hash = spec.hash();
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let id = format!("{i:05}");
        let rel = PathBuf::from("samples").join(&id);
        let (lr, stack) = synthesize_sample(&sample_spec(spec, i), degradation)?;
        let lr_path = rel.join("lr.png");
        let hr_dir = rel.join("hr");
        stack_io::save_lr(&out_dir.join(&lr_path), &lr)?;
        stack_io::save_stack_with_hash(&stack, &out_dir.join(&hr_dir), &hash)?;
        let (split, slide) = split.assign(i);
        samples.push(SampleRecord {
            id,
            lr_path,
            hr_dir,
            split,
            slide,
        });
        log::debug!("wrote sample {i}");
    }
    let manifest = Manifest {
        created_by: CREATED_BY.into(),
        samples,
        source: serde_json::json!({
            "phantom": spec,
            "degradation": degradation,
            "split": split,
            "spec_hash": hash,
        }),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec::default().with_canvas(64)
    }

    #[test]
    fn deterministic() {
        let s = small();
        assert_eq!(render_stack(&s).unwrap(), render_stack(&s).unwrap());
    }

    #[test]
    fn empty_scene_is_background() {
        let s = PhantomSpec {
            num_objects: 0,
            ..small()
        };
        let st = render_stack(&s).unwrap();
        for k in 0..st.num_planes() {
            let p = st.storage_plane(k);
            for c in 0..3 {
                assert!(p
                    .channel(c)
                    .iter()
                    .all(|&v| v == s.background_color[c] as f32));
            }
        }
    }

    #[test]
    fn validation() {
        assert!(PhantomSpec {
            num_planes: 10,
            ..small()
        }
        .validate()
        .is_err());
        assert!(PhantomSpec {
            defocus_rate: 0.0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(PhantomSpec {
            canvas_size: 0,
            ..small()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn reflect101_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect101(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn kernel_sums_to_one_and_is_symmetric() {
        let k = gaussian_kernel_2d(5, 3.0);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(k[i * 5 + j], k[j * 5 + i]);
                assert_eq!(k[i * 5 + j], k[(4 - i) * 5 + (4 - j)]);
            }
        }
    }

    #[test]
    fn degrade_halves_and_rejects_odd() {
        let img = Tensor::filled(3, 16, 24, 100.0f32);
        let lr = degrade(&img, &DegradationSpec::default()).unwrap();
        assert_eq!(lr.shape(), (3, 8, 12));
        assert!(degrade(&Tensor::filled(3, 15, 24, 1.0), &DegradationSpec::default()).is_err());
    }

    #[test]
    fn split_policies() {
        let p = SplitPolicy::default();
        let train = (0..10).filter(|&i| p.assign(i).0 == Split::Train).count();
        assert_eq!(train, 6);
        let e = SplitPolicy::Explicit { train: 3 };
        assert_eq!(e.assign(2).0, Split::Train);
        assert_eq!(e.assign(3).0, Split::Test);
    }

    #[test]
    fn with_canvas_keeps_density() {
        let s = PhantomSpec::default().with_canvas(384);
        assert_eq!(s.num_objects, 18);
    }
}

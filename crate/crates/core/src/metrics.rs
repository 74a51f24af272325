//! Image quality metrics on 8-bit-range floats, evaluated per focal plane.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Result};
use crate::par;
use crate::stack_io::FocalStack;
use crate::tensor::Tensor;

/// Peak value of 8-bit data.
pub const PEAK: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * PEAK) * (0.01 * PEAK);
pub const SSIM_C2: f64 = (0.03 * PEAK) * (0.03 * PEAK);

fn check_pair(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    ensure_shape!(
        a.same_shape(b),
        "metric inputs {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    ensure_shape!(!a.is_empty(), "metric inputs are empty");
    Ok(())
}

pub fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

pub fn mae(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(s / a.len() as f64)
}

/// `10 log10(255^2 / mse)`; `+inf` when `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    }
}

pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Luma (ITU-R BT.601 weights) of an RGB image; single-channel input is
/// returned unchanged.
pub fn to_gray(img: &Tensor<f64>) -> Tensor<f64> {
    if img.channels() == 1 {
        return img.clone();
    }
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    let data = (0..img.plane_len())
        .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
        .collect();
    Tensor::from_vec(1, img.height(), img.width(), data).expect("plane sized")
}

fn window_1d() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` buffer.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &x[y * w..(y + 1) * w];
        for xo in 0..ow {
            tmp[y * ow + xo] = k.iter().zip(&row[xo..xo + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..n).map(|j| k[j] * tmp[(yo + j) * ow + xo]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully-contained Gaussian windows of the luma images.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_pair(a, b)?;
    ensure_shape!(
        a.height() >= SSIM_WINDOW && a.width() >= SSIM_WINDOW,
        "{}x{} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
        a.height(),
        a.width()
    );
    let (ga, gb) = (to_gray(a), to_gray(b));
    let (h, w) = (a.height(), a.width());
    let k = window_1d();
    let x = ga.data();
    let y = gb.data();
    let prod = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<f64>>();
    let mu_a = filter_valid(x, h, w, &k);
    let mu_b = filter_valid(y, h, w, &k);
    let aa = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &k);
    let bb = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &k);
    let ab = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// `|pred - gt|` on luma.
pub fn error_map(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<Tensor<f64>> {
    check_pair(pred, gt)?;
    let (p, g) = (to_gray(pred), to_gray(gt));
    Ok(Tensor::from_fn(1, p.height(), p.width(), |_, y, x| {
        (p.at(0, y, x) - g.at(0, y, x)).abs()
    }))
}

fn batch_mean(
    a: &[Tensor<f64>],
    b: &[Tensor<f64>],
    f: fn(&Tensor<f64>, &Tensor<f64>) -> Result<f64>,
) -> Result<f64> {
    ensure_shape!(
        !a.is_empty() && a.len() == b.len(),
        "batches of {} and {} images",
        a.len(),
        b.len()
    );
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += f(x, y)?;
    }
    Ok(s / a.len() as f64)
}

pub fn batch_mse(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> Result<f64> {
    batch_mean(a, b, mse)
}

pub fn batch_mae(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> Result<f64> {
    batch_mean(a, b, mae)
}

/// Mean of per-image PSNRs.
pub fn batch_psnr(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> Result<f64> {
    batch_mean(a, b, psnr)
}

pub fn batch_ssim(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> Result<f64> {
    batch_mean(a, b, ssim)
}

/// Serialises non-finite PSNR as the string `"inf"`.
mod inf_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(de::Error::custom(format!(
                "expected a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneMetrics {
    pub depth_um: f64,
    #[serde(with = "inf_f64")]
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "inf_f64")]
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_plane: Vec<PlaneMetrics>,
    /// Means over planes.
    pub aggregate: Aggregate,
    pub n_samples: usize,
}

impl MetricReport {
    pub fn plane_at_depth(&self, depth_um: f64) -> Option<&PlaneMetrics> {
        self.per_plane
            .iter()
            .find(|p| (p.depth_um - depth_um).abs() < 1e-9)
    }

    /// Fixed-width text table: one row per plane and a mean row.
    pub fn table(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title} (n = {})", self.n_samples);
        let _ = writeln!(
            s,
            "{:>10} {:>10} {:>8} {:>10} {:>8}",
            "depth_um", "psnr_db", "ssim", "mse", "mae"
        );
        for p in &self.per_plane {
            let _ = writeln!(
                s,
                "{:>10.1} {:>10} {:>8.4} {:>10.3} {:>8.3}",
                p.depth_um,
                fmt_psnr(p.psnr),
                p.ssim,
                p.mse,
                p.mae
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(
            s,
            "{:>10} {:>10} {:>8.4} {:>10.3} {:>8.3}",
            "mean",
            fmt_psnr(a.psnr),
            a.ssim,
            a.mse,
            a.mae
        );
        s
    }
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.3}")
    }
}

/// Storage-range (`[0, 255]`), unquantised copy of plane `k`.
pub fn plane_storage(stack: &FocalStack, k: usize) -> Tensor<f64> {
    stack.plane(k).cast::<f64>().map(|x| (x + 1.0) * 127.5)
}

/// Per-plane metrics averaged over a batch of stack pairs.
pub fn evaluate_stacks(pred: &[FocalStack], gt: &[FocalStack]) -> Result<MetricReport> {
    ensure_shape!(
        !pred.is_empty() && pred.len() == gt.len(),
        "{} predicted stacks for {} ground-truth stacks",
        pred.len(),
        gt.len()
    );
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        ensure_shape!(
            p.dims() == g.dims(),
            "sample {i}: predicted stack {:?} vs ground truth {:?}",
            p.dims(),
            g.dims()
        );
        ensure_shape!(
            p.plane_depths() == g.plane_depths(),
            "sample {i}: plane depths differ ({:?} vs {:?})",
            p.plane_depths(),
            g.plane_depths()
        );
    }
    let z = gt[0].num_planes();
    let rows = par::map_indexed(z, |k| -> Result<PlaneMetrics> {
        let a: Vec<Tensor<f64>> = pred.iter().map(|s| plane_storage(s, k)).collect();
        let b: Vec<Tensor<f64>> = gt.iter().map(|s| plane_storage(s, k)).collect();
        Ok(PlaneMetrics {
            depth_um: gt[0].plane_depths()[k],
            psnr: batch_psnr(&a, &b)?,
            ssim: batch_ssim(&a, &b)?,
            mse: batch_mse(&a, &b)?,
            mae: batch_mae(&a, &b)?,
        })
    });
    let per_plane = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let n = per_plane.len() as f64;
    let mean = |f: fn(&PlaneMetrics) -> f64| per_plane.iter().map(f).sum::<f64>() / n;
    let aggregate = Aggregate {
        psnr: mean(|p| p.psnr),
        ssim: mean(|p| p.ssim),
        mse: mean(|p| p.mse),
        mae: mean(|p| p.mae),
    };
    Ok(MetricReport {
        per_plane,
        aggregate,
        n_samples: pred.len(),
    })
}

/// Per-plane luma error maps of one sample.
pub fn stack_error_maps(pred: &FocalStack, gt: &FocalStack) -> Result<Vec<Tensor<f64>>> {
    ensure_shape!(
        pred.dims() == gt.dims(),
        "stacks {:?} vs {:?}",
        pred.dims(),
        gt.dims()
    );
    (0..gt.num_planes())
        .map(|k| error_map(&plane_storage(pred, k), &plane_storage(gt, k)))
        .collect()
}

/// A stack whose every plane is `plane` (normalised range).
pub fn replicate_plane(plane: &Tensor<f32>, plane_depths: Vec<f64>) -> Result<FocalStack> {
    let planes = vec![plane.clone(); plane_depths.len()];
    FocalStack::from_planes(&planes, plane_depths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_sentinel_roundtrips_through_json() {
        let p = PlaneMetrics {
            depth_um: 0.0,
            psnr: f64::INFINITY,
            ssim: 1.0,
            mse: 0.0,
            mae: 0.0,
        };
        let j = serde_json::to_string(&p).unwrap();
        assert!(j.contains("\"inf\""));
        let back: PlaneMetrics = serde_json::from_str(&j).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f64>::zeros(1, 10, 20);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a = Tensor::<f64>::from_fn(3, 16, 16, |c, y, x| {
            ((c * 31 + y * 17 + x * 7) % 256) as f64
        });
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn gray_weights() {
        let a = Tensor::<f64>::from_vec(3, 1, 1, vec![100.0, 50.0, 200.0]).unwrap();
        assert!((to_gray(&a).data()[0] - (29.9 + 29.35 + 22.8)).abs() < 1e-12);
    }
}

//! On-disk formats: focal stacks as per-plane 8-bit PNGs plus a JSON
//! sidecar, dataset manifests, and training checkpoints.
//!
//! ```text
//! <stack dir>/plane_00.png … plane_{Z-1}.png
//! <stack dir>/meta.json      {plane_depths_um, normalization, created_by, spec_hash, ...}
//! ```

mod checkpoint;

pub use checkpoint::{checkpoint_name, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::generator::COLOR_CHANNELS;
use crate::tensor::Tensor;

pub const CREATED_BY: &str = concat!("mfpinet ", env!("CARGO_PKG_VERSION"));
pub const NORMALIZATION: &str = "x/127.5-1";
pub const SIDECAR: &str = "meta.json";

/// 8-bit storage value to the network range [-1, 1].
#[inline]
pub fn normalize(v: f32) -> f32 {
    v / 127.5 - 1.0
}

/// Network range back to (unquantised) 8-bit storage intensities.
#[inline]
pub fn denormalize(x: f32) -> f32 {
    (x + 1.0) * 127.5
}

/// Nearest 8-bit code of a network-range value.
#[inline]
pub fn quantize(x: f32) -> u8 {
    denormalize(x).round().clamp(0.0, 255.0) as u8
}

pub fn normalize_image(storage: &Tensor<f32>) -> Tensor<f32> {
    storage.map(normalize)
}

pub fn denormalize_image(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(denormalize)
}

/// Depth of plane `k` in µm: `(k - (n-1)/2) * spacing`.
pub fn plane_depths(num_planes: usize, spacing_um: f64) -> Vec<f64> {
    let mid = (num_planes as f64 - 1.0) / 2.0;
    (0..num_planes)
        .map(|k| (k as f64 - mid) * spacing_um)
        .collect()
}

/// An `H x W x Z x C` focal stack, stored plane-major as a `(Z*C, H, W)`
/// tensor with values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FocalStack {
    data: Tensor<f32>,
    plane_depths: Vec<f64>,
}

impl FocalStack {
    pub fn new(data: Tensor<f32>, plane_depths: Vec<f64>) -> Result<Self> {
        let z = plane_depths.len();
        ensure_shape!(z > 0, "focal stack needs at least one plane");
        ensure_shape!(
            data.channels() == z * COLOR_CHANNELS,
            "{} channels cannot hold {z} RGB planes",
            data.channels()
        );
        validate_depths(&plane_depths)?;
        if let Some(v) = data.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!(
                "focal stack value {v} outside [-1, 1]"
            )));
        }
        Ok(FocalStack { data, plane_depths })
    }

    pub fn from_planes(planes: &[Tensor<f32>], plane_depths: Vec<f64>) -> Result<Self> {
        ensure_shape!(
            planes.len() == plane_depths.len(),
            "{} planes but {} depths",
            planes.len(),
            plane_depths.len()
        );
        let first = planes
            .first()
            .ok_or_else(|| Error::Shape("no planes".into()))?;
        let mut data = Vec::with_capacity(first.len() * planes.len());
        for p in planes {
            ensure_shape!(
                p.same_shape(first),
                "plane {:?} vs {:?}",
                p.shape(),
                first.shape()
            );
            data.extend_from_slice(p.data());
        }
        let t = Tensor::from_vec(
            first.channels() * planes.len(),
            first.height(),
            first.width(),
            data,
        )?;
        Self::new(t, plane_depths)
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<f32> {
        self.data
    }

    pub fn plane_depths(&self) -> &[f64] {
        &self.plane_depths
    }

    pub fn num_planes(&self) -> usize {
        self.plane_depths.len()
    }

    pub fn channels_per_plane(&self) -> usize {
        self.data.channels() / self.num_planes()
    }

    pub fn height(&self) -> usize {
        self.data.height()
    }

    pub fn width(&self) -> usize {
        self.data.width()
    }

    /// `(H, W, Z, C)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (
            self.height(),
            self.width(),
            self.num_planes(),
            self.channels_per_plane(),
        )
    }

    pub fn middle_plane_index(&self) -> usize {
        self.num_planes() / 2
    }

    pub fn plane(&self, k: usize) -> Tensor<f32> {
        let c = self.channels_per_plane();
        self.data.channel_range(k * c, c)
    }

    pub fn planes(&self) -> Vec<Tensor<f32>> {
        (0..self.num_planes()).map(|k| self.plane(k)).collect()
    }

    /// Plane `k` as exact 8-bit storage values (rounded).
    pub fn storage_plane(&self, k: usize) -> Tensor<f32> {
        self.plane(k).map(|x| quantize(x) as f32)
    }
}

fn validate_depths(d: &[f64]) -> Result<()> {
    if d.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Shape(format!(
            "plane depths {d:?} are not strictly increasing"
        )));
    }
    let n = d.len();
    for k in 0..n {
        if (d[k] + d[n - 1 - k]).abs() > 1e-9 {
            return Err(Error::Shape(format!(
                "plane depths {d:?} are not symmetric about 0"
            )));
        }
    }
    Ok(())
}

/// Sidecar written next to every stored stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackMeta {
    pub plane_depths_um: Vec<f64>,
    pub normalization: String,
    pub created_by: String,
    pub spec_hash: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

pub fn plane_file_name(k: usize) -> String {
    format!("plane_{k:02}.png")
}

pub fn save_stack(stack: &FocalStack, dir: &Path) -> Result<()> {
    save_stack_with_hash(stack, dir, "none")
}

pub fn save_stack_with_hash(stack: &FocalStack, dir: &Path, spec_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for k in 0..stack.num_planes() {
        write_png(&dir.join(plane_file_name(k)), &stack.storage_plane(k))?;
    }
    let meta = StackMeta {
        plane_depths_um: stack.plane_depths().to_vec(),
        normalization: NORMALIZATION.into(),
        created_by: CREATED_BY.into(),
        spec_hash: spec_hash.into(),
        height: stack.height(),
        width: stack.width(),
        channels: stack.channels_per_plane(),
    };
    write_json(&dir.join(SIDECAR), &meta)
}

pub fn load_stack(dir: &Path) -> Result<FocalStack> {
    let meta_path = dir.join(SIDECAR);
    let meta: StackMeta = read_json(&meta_path)?;
    if meta.normalization != NORMALIZATION {
        return Err(Error::format(
            &meta_path,
            format!("unsupported normalization {:?}", meta.normalization),
        ));
    }
    let z = meta.plane_depths_um.len();
    let extra = dir.join(plane_file_name(z));
    if extra.exists() {
        return Err(Error::format(
            extra,
            format!("sidecar lists {z} depths but more plane files exist"),
        ));
    }
    let mut planes = Vec::with_capacity(z);
    for k in 0..z {
        let path = dir.join(plane_file_name(k));
        if !path.exists() {
            return Err(Error::format(path, "missing plane file"));
        }
        let img = read_png(&path)?;
        if img.shape() != (meta.channels, meta.height, meta.width) {
            return Err(Error::format(
                path,
                format!(
                    "decoded {:?}, sidecar says {:?}",
                    img.shape(),
                    (meta.channels, meta.height, meta.width)
                ),
            ));
        }
        planes.push(normalize_image(&img));
    }
    FocalStack::from_planes(&planes, meta.plane_depths_um)
        .map_err(|e| Error::format(dir, e.to_string()))
}

/// Write a 1- or 3-channel image of 8-bit storage values (rounded, clamped).
pub fn write_png(path: &Path, storage: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = storage.shape();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Shape(format!("cannot write {c}-channel png"))),
    };
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(storage.at(ch, y, x).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .finish()
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Read an 8-bit PNG into storage-range values. RGBA drops alpha and
/// grey-alpha drops alpha; greyscale stays single channel.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (stride, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported colour type {other:?}"),
            ))
        }
    };
    let mut t = Tensor::zeros(keep, h, w);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for c in 0..keep {
                *t.at_mut(c, y, x) = row[x * stride + c] as f32;
            }
        }
    }
    Ok(t)
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One (LR input, HR stack) pair of a dataset; paths relative to the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub lr_path: PathBuf,
    pub hr_dir: PathBuf,
    pub split: Split,
    /// Virtual slide the sample was drawn from; splits never share a slide.
    pub slide: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub created_by: String,
    pub samples: Vec<SampleRecord>,
    /// Generator parameters used to produce the data, if synthetic.
    pub source: serde_json::Value,
}

pub const MANIFEST: &str = "manifest.json";

impl Manifest {
    pub fn load(root: &Path) -> Result<Manifest> {
        read_json(&root.join(MANIFEST))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        write_json(&root.join(MANIFEST), self)
    }

    pub fn split(&self, split: Split) -> Vec<SampleRecord> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .cloned()
            .collect()
    }
}

/// Load an LR input as a normalised `(3, h, w)` tensor.
pub fn load_lr(path: &Path) -> Result<Tensor<f32>> {
    let img = read_png(path)?;
    if img.channels() != 3 {
        return Err(Error::format(
            path,
            format!("expected RGB, found {} channels", img.channels()),
        ));
    }
    Ok(normalize_image(&img))
}

pub fn save_lr(path: &Path, lr: &Tensor<f32>) -> Result<()> {
    write_png(path, &denormalize_image(lr))
}

/// A manifest split resolved against its dataset root.
#[derive(Clone, Debug)]
pub struct DiskDataset {
    root: PathBuf,
    records: Vec<SampleRecord>,
}

impl DiskDataset {
    pub fn open(root: &Path, split: Split) -> Result<Self> {
        let manifest = Manifest::load(root)?;
        Ok(DiskDataset {
            root: root.to_path_buf(),
            records: manifest.split(split),
        })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<(Tensor<f32>, FocalStack)> {
        let r = &self.records[index];
        let lr = load_lr(&self.root.join(&r.lr_path))?;
        let hr = load_stack(&self.root.join(&r.hr_dir))?;
        ensure_shape!(
            lr.height() * 2 == hr.height() && lr.width() * 2 == hr.width(),
            "sample {}: LR {}x{} does not pair with HR {}x{}",
            r.id,
            lr.height(),
            lr.width(),
            hr.height(),
            hr.width()
        );
        Ok((lr, hr))
    }
}

//! Single-file training checkpoints.
//!
//! Layout: the magic `MFPICKPT`, a little-endian `u32` version, a `u64`
//! header length, a JSON header, then every tensor as little-endian `f32`
//! in header order.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::Parameters;
use crate::training::{Adam, TrainConfig, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MFPICKPT";

/// File name of the checkpoint written after `epoch` completed epochs.
pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch}")
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    created_by: String,
    epoch: usize,
    step: u64,
    lr: f64,
    seed: u64,
    train: TrainConfig,
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    adam_g_step: u64,
    adam_d_step: u64,
    tensors: Vec<TensorEntry>,
}

fn collect(
    net: &impl Parameters<f32>,
    opt: &Adam<f32>,
    tag: &str,
    entries: &mut Vec<TensorEntry>,
    payload: &mut Vec<f32>,
) {
    let mut i = 0;
    net.visit("", &mut |name, p| {
        for (kind, data) in [("w", &p.value), ("m", &opt.m[i]), ("v", &opt.v[i])] {
            entries.push(TensorEntry {
                name: format!("{tag}.{kind}.{name}"),
                shape: p.shape.clone(),
                len: data.len(),
            });
            payload.extend_from_slice(data);
        }
        i += 1;
    });
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    collect(
        &state.generator,
        &state.opt_g,
        "generator",
        &mut tensors,
        &mut payload,
    );
    collect(
        &state.discriminator,
        &state.opt_d,
        "discriminator",
        &mut tensors,
        &mut payload,
    );
    let header = Header {
        created_by: super::CREATED_BY.into(),
        epoch: state.epoch,
        step: state.step,
        lr: state.current_lr(),
        seed: state.config.seed,
        train: state.config.clone(),
        generator: state.generator.config().clone(),
        discriminator: state.discriminator.config().clone(),
        adam_g_step: state.opt_g.step,
        adam_d_step: state.opt_d.step,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for v in &payload {
            w.write_all(&v.to_le_bytes())?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Restore a [`TrainState`]. With `expected`, the stored generator
/// architecture must match it.
pub fn load_checkpoint(path: &Path, expected: Option<&GeneratorConfig>) -> Result<TrainState> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "{} has format version {version}, this build reads version {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
    let hlen = u64::from_le_bytes(b8) as usize;
    if hlen > 1 << 28 {
        return Err(Error::format(
            path,
            format!("implausible header length {hlen}"),
        ));
    }
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::format(path, e.to_string()))?;
    if let Some(want) = expected {
        if *want != header.generator {
            return Err(Error::Incompatible(format!(
                "{} holds generator {:?}, expected {:?}",
                path.display(),
                header.generator,
                want
            )));
        }
    }

    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if bytes.len() != total * 4 {
        return Err(Error::format(
            path,
            format!(
                "payload holds {} bytes, header describes {}",
                bytes.len(),
                total * 4
            ),
        ));
    }
    let mut table: HashMap<&str, (&TensorEntry, &[u8])> = HashMap::new();
    let mut off = 0;
    for t in &header.tensors {
        table.insert(&t.name, (t, &bytes[off..off + t.len * 4]));
        off += t.len * 4;
    }

    let mut generator = Generator::<f32>::new(header.generator.clone(), 0)?;
    let mut discriminator = Discriminator::<f32>::new(header.discriminator.clone(), 0)?;
    let mut state = TrainState::from_parts(
        header.train.clone(),
        generator.clone(),
        discriminator.clone(),
    );
    restore(&mut generator, &mut state.opt_g, "generator", &table)?;
    restore(
        &mut discriminator,
        &mut state.opt_d,
        "discriminator",
        &table,
    )?;
    let used = 3 * (count(&generator) + count(&discriminator));
    if used != header.tensors.len() {
        return Err(Error::Incompatible(format!(
            "{} stores {} tensors, the configured networks use {used}",
            path.display(),
            header.tensors.len()
        )));
    }
    state.generator = generator;
    state.discriminator = discriminator;
    state.opt_g.step = header.adam_g_step;
    state.opt_d.step = header.adam_d_step;
    state.epoch = header.epoch;
    state.step = header.step;
    Ok(state)
}

fn count(net: &impl Parameters<f32>) -> usize {
    let mut n = 0;
    net.visit("", &mut |_, _| n += 1);
    n
}

fn restore(
    net: &mut impl Parameters<f32>,
    opt: &mut Adam<f32>,
    tag: &str,
    table: &HashMap<&str, (&TensorEntry, &[u8])>,
) -> Result<()> {
    let mut i = 0;
    let mut err = None;
    net.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        for kind in ["w", "m", "v"] {
            let key = format!("{tag}.{kind}.{name}");
            let Some((entry, raw)) = table.get(key.as_str()) else {
                err = Some(Error::Incompatible(format!("missing tensor {key}")));
                return;
            };
            if entry.shape != p.shape || entry.len != p.value.len() {
                err = Some(Error::Incompatible(format!(
                    "tensor {key} has shape {:?}, the network expects {:?}",
                    entry.shape, p.shape
                )));
                return;
            }
            let dst = match kind {
                "w" => &mut p.value,
                "m" => &mut opt.m[i],
                _ => &mut opt.v[i],
            };
            for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        i += 1;
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

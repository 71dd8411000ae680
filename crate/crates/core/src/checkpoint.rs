//! Binary checkpoints.
//!
//! Layout: 8-byte magic, u64 LE manifest length, JSON manifest, then every
//! tensor as raw f32 LE in manifest order. The manifest carries the
//! architecture, stage counts, variant, seed, class names and the offset and
//! shape of each tensor, so a file is usable without any other artifact.

use std::fs;
use std::path::Path;

use jers_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::networks::{ArchConfig, Networks, Parameters};
use crate::pipeline::{Atlas, JersModel, Stages, Variant};
use crate::train::{Adam, AdamConfig, Moments};

pub const MAGIC: &[u8; 8] = b"JERSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f32 elements from the start of the blob section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub stages: Stages,
    pub variant: Variant,
    pub seed: u64,
    pub class_names: Vec<String>,
    /// Optimizer steps taken to produce these weights.
    pub step: usize,
    pub optimizer: Option<OptimizerState>,
    /// Free-form run metadata (settings, validation scores).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<BlobEntry>,
}

/// A model plus the state needed to resume training it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: JersModel<f32>,
    pub seed: u64,
    pub step: usize,
    pub optimizer: Option<Adam>,
    pub extra: serde_json::Value,
}

fn push_blob(
    entries: &mut Vec<BlobEntry>,
    blob: &mut Vec<f32>,
    name: String,
    shape: &[usize],
    data: &[f32],
) {
    entries.push(BlobEntry {
        name,
        shape: shape.to_vec(),
        offset: blob.len(),
    });
    blob.extend_from_slice(data);
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let m = &ck.model;
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    push_blob(
        &mut tensors,
        &mut blob,
        "atlas.image".into(),
        m.atlas.image.shape(),
        m.atlas.image.data(),
    );
    push_blob(
        &mut tensors,
        &mut blob,
        "atlas.labels".into(),
        m.atlas.labels.shape(),
        m.atlas.labels.data(),
    );
    for (name, t) in m.nets.params() {
        push_blob(&mut tensors, &mut blob, name, t.shape(), t.data());
    }
    if let Some(opt) = &ck.optimizer {
        for (name, mom) in &opt.moments {
            push_blob(
                &mut tensors,
                &mut blob,
                format!("adam.m.{name}"),
                &[mom.m.len()],
                &mom.m,
            );
            push_blob(
                &mut tensors,
                &mut blob,
                format!("adam.v.{name}"),
                &[mom.v.len()],
                &mom.v,
            );
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arch: m.arch.clone(),
        stages: m.stages,
        variant: m.variant,
        seed: ck.seed,
        class_names: m.atlas.class_names.clone(),
        step: ck.step,
        optimizer: ck.optimizer.as_ref().map(|o| OptimizerState {
            config: o.config.clone(),
            t: o.t,
        }),
        extra: ck.extra.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + blob.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads only the manifest.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CoreError::format("magic", "not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CoreError::format("manifest", "length exceeds file size"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| CoreError::format("manifest", e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CoreError::format(
            "format_version",
            format!("unsupported version {}", manifest.format_version),
        ));
    }
    let rest = &bytes[end..];
    if rest.len() % 4 != 0 {
        return Err(CoreError::format(
            "payload",
            format!("{} bytes is not a whole number of floats", rest.len()),
        ));
    }
    Ok((manifest, rest))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (man, rest) = decode_manifest(bytes)?;
    let floats = rest.len() / 4;
    let mut blobs = Blobs::new();
    for e in &man.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset.checked_add(n).map_or(true, |end| end > floats) {
            return Err(CoreError::format(
                format!("tensors.{}", e.name),
                "extends past the end of the payload",
            ));
        }
        let data: Vec<f32> = rest[e.offset * 4..(e.offset + n) * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        blobs.insert(e.name.clone(), (e.shape.clone(), data));
    }
    type Blobs = std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)>;
    fn take(blobs: &mut Blobs, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        blobs
            .remove(name)
            .ok_or_else(|| CoreError::format(format!("tensors.{name}"), "missing"))
    }

    man.arch.validate()?;
    let (shape, data) = take(&mut blobs, "atlas.image")?;
    let image = Tensor::new(&shape, data)?;
    let (shape, data) = take(&mut blobs, "atlas.labels")?;
    let labels = Tensor::new(&shape, data)?;
    if labels.shape()[0] != man.class_names.len() {
        return Err(CoreError::format(
            "class_names",
            format!(
                "{} names for {} label channels",
                man.class_names.len(),
                labels.shape()[0]
            ),
        ));
    }
    let atlas = Atlas {
        image,
        labels,
        class_names: man.class_names.clone(),
    };
    let mut nets = Networks::<f32>::new(&man.arch, man.seed)?;
    for (name, p) in nets.params_mut() {
        let (shape, data) = take(&mut blobs, &name)?;
        if shape != p.shape() {
            return Err(CoreError::format(
                format!("tensors.{name}"),
                format!("shape {shape:?}, architecture expects {:?}", p.shape()),
            ));
        }
        *p = Tensor::param(&shape, data)?;
    }
    let optimizer = match &man.optimizer {
        None => None,
        Some(st) => {
            let mut adam = Adam::new(st.config.clone())?;
            adam.t = st.t;
            let names: Vec<String> = blobs
                .keys()
                .filter_map(|k| k.strip_prefix("adam.m.").map(str::to_string))
                .collect();
            for name in names {
                let (_, m) = take(&mut blobs, &format!("adam.m.{name}"))?;
                let (_, v) = take(&mut blobs, &format!("adam.v.{name}"))?;
                adam.moments.insert(name, Moments { m, v });
            }
            Some(adam)
        }
    };
    if let Some(name) = blobs.keys().next() {
        return Err(CoreError::format(
            format!("tensors.{name}"),
            "unexpected tensor",
        ));
    }
    let model = JersModel {
        nets,
        arch: man.arch,
        stages: man.stages,
        variant: man.variant,
        atlas,
    };
    model.stages.validate()?;
    Ok(Checkpoint {
        model,
        seed: man.seed,
        step: man.step,
        optimizer,
        extra: man.extra,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ck)).map_err(|e| CoreError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode(&bytes)
}

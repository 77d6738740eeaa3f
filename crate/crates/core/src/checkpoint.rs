//! Single-file checkpoints.
//!
//! Layout: `"MGLE"`, format version (u32 LE), manifest length (u64 LE), the
//! JSON manifest, then every tensor as f32 LE in manifest order. Offsets are
//! relative to the first payload byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dit::Phase;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"MGLE";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub phase: Phase,
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub phase: Phase,
    pub step: usize,
    pub tensors: Vec<(String, Tensor)>,
}

fn payload(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let mut entries = Vec::with_capacity(ck.tensors.len());
    for (name, t) in &ck.tensors {
        let bytes = payload(t);
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: body.len() as u64,
            length: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        body.extend(bytes);
    }
    let manifest = serde_json::to_vec(&Manifest {
        config: ck.config.clone(),
        config_hash: ck.config.config_hash(),
        phase: ck.phase,
        step: ck.step,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(HEADER + manifest.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend(manifest);
    out.extend(body);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = HEADER
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Corrupt("manifest extends past end of file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER..body_start])
        .map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
    let body = &bytes[body_start..];

    let mut expected = 0u64;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.offset != expected || e.length != 4 * numel as u64 {
            return Err(Error::Corrupt(format!(
                "tensor {} breaks the payload layout",
                e.name
            )));
        }
        expected += e.length;
        let end = e.offset + e.length;
        if end > body.len() as u64 {
            return Err(Error::Corrupt(format!("tensor {} is truncated", e.name)));
        }
        let raw = &body[e.offset as usize..end as usize];
        if hex::encode(Sha256::digest(raw)) != e.sha256 {
            return Err(Error::Corrupt(format!(
                "tensor {} fails its checksum",
                e.name
            )));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    if expected != body.len() as u64 {
        return Err(Error::Corrupt(format!(
            "payload is {} bytes, manifest accounts for {expected}",
            body.len()
        )));
    }
    if manifest.config.config_hash() != manifest.config_hash {
        return Err(Error::Corrupt(
            "embedded config does not match its hash".into(),
        ));
    }
    Ok(Checkpoint {
        config: manifest.config,
        phase: manifest.phase,
        step: manifest.step,
        tensors,
    })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode(ck)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| Error::Load {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

pub fn from_model(model: &Model, step: usize) -> Checkpoint {
    Checkpoint {
        config: model.cfg.clone(),
        phase: model.phase,
        step,
        tensors: model
            .store
            .ids()
            .map(|id| {
                (
                    model.store.name(id).to_string(),
                    model.store.value(id).clone(),
                )
            })
            .collect(),
    }
}

pub fn save_model(model: &Model, step: usize, path: &Path) -> Result<()> {
    save(&from_model(model, step), path)
}

/// Copy named tensors into `model`; every tensor must exist with the same shape.
pub fn restore_into(model: &mut Model, tensors: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in tensors {
        let id = model.store.id(name).ok_or_else(|| {
            Error::Format(format!("checkpoint tensor {name} has no model parameter"))
        })?;
        if model.store.value(id).shape() != t.shape() {
            return Err(Error::Format(format!(
                "{name}: checkpoint shape {:?} vs model {:?}",
                t.shape(),
                model.store.value(id).shape()
            )));
        }
        *model.store.value_mut(id) = t.clone();
    }
    Ok(())
}

/// Rebuild the model a checkpoint was taken from.
pub fn load_model(path: &Path) -> Result<(Model, usize)> {
    let ck = load(path)?;
    let mut model = Model::new(&ck.config, ck.phase)?;
    if ck.tensors.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model has {}",
            ck.tensors.len(),
            model.store.len()
        )));
    }
    restore_into(&mut model, &ck.tensors)?;
    Ok((model, ck.step))
}

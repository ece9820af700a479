//! Checkpoint file: `u64` LE header length, a JSON header, then every tensor's
//! `f32` LE payload in header order.

use std::fs;
use std::path::Path;

use imupose_core::model::{Model, ModelSpec};
use imupose_core::nn::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelSpec,
    /// Effective run configuration that produced the parameters.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
}

pub fn encode(spec: &ModelSpec, config: &serde_json::Value, params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: spec.clone(),
        config: config.clone(),
        tensors: params
            .params()
            .iter()
            .map(|p| TensorInfo {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
    let mut out = Vec::with_capacity(8 + json.len() + params.numel() * 4);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params.params() {
        out.extend(p.value.iter().flat_map(|v| v.to_le_bytes()));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, spec: &ModelSpec, config: &serde_json::Value, params: &ParamStore<f32>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(spec, config, params)?).map_err(|e| Error::io(path, e))
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let corrupt = |d: String| Error::invalid(format!("checkpoint {}", origin.display()), d);
    if bytes.len() < 8 {
        return Err(corrupt("file shorter than the header length field".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap_or_default()) as usize;
    let body = bytes.get(8..8usize.saturating_add(hlen)).ok_or_else(|| corrupt(format!("header of {hlen} bytes is truncated")))?;
    let raw: serde_json::Value = serde_json::from_slice(body).map_err(|e| Error::json(origin, e))?;
    let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: origin.to_path_buf(),
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: CheckpointHeader = serde_json::from_value(raw).map_err(|e| Error::json(origin, e))?;
    let mut params = ParamStore::<f32>::new();
    // The layout is rebuilt from the spec so names and order are checked against the code.
    Model::new(&mut params, header.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    if params.len() != header.tensors.len() {
        return Err(corrupt(format!("{} tensors listed, model has {}", header.tensors.len(), params.len())));
    }
    let mut at = 8 + hlen;
    for (p, t) in params.params_mut().iter_mut().zip(&header.tensors) {
        if p.name != t.name || p.shape != t.shape {
            return Err(corrupt(format!("tensor '{}' {:?} where the model has '{}' {:?}", t.name, t.shape, p.name, p.shape)));
        }
        let n = p.value.len() * 4;
        let chunk = bytes
            .get(at..at + n)
            .ok_or_else(|| corrupt(format!("payload of tensor '{}' is truncated", t.name)))?;
        for (v, c) in p.value.iter_mut().zip(chunk.chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        at += n;
    }
    if at != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes after the last tensor", bytes.len() - at)));
    }
    Ok(Checkpoint { header, params })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        let mut scratch = ParamStore::<f32>::new();
        Ok(Model::new(&mut scratch, self.header.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?)
    }
}

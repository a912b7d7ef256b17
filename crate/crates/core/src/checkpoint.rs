//! Binary checkpoint container.
//!
//! Layout: `b"CFIT"`, `u16` version, `u32` header length, JSON header,
//! then the little-endian `f32` payloads. Tensor offsets count from the
//! first payload byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{numel, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CFIT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    state: TrainState,
    tensors: Vec<TensorEntry>,
    velocities: Vec<String>,
    payload_len: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    pub config: serde_json::Value,
    pub params: Vec<(String, Tensor<f32>)>,
    /// Optimizer momentum per parameter, same order as `params` (may be empty).
    pub velocities: Vec<Tensor<f32>>,
    pub state: TrainState,
}

const VELOCITY_PREFIX: &str = "velocity/";

impl Checkpoint {
    pub fn from_store(
        config: serde_json::Value,
        store: &ParamStore<f32>,
        velocities: Vec<Tensor<f32>>,
        state: TrainState,
    ) -> Self {
        Self {
            version: VERSION,
            config,
            params: store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            velocities,
            state,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let vel_names: Vec<String> = self
            .params
            .iter()
            .take(self.velocities.len())
            .map(|(n, _)| format!("{VELOCITY_PREFIX}{n}"))
            .collect();
        let all = self
            .params
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .chain(vel_names.iter().map(String::as_str).zip(&self.velocities));
        for (name, t) in all {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                length: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            config: self.config.clone(),
            state: self.state.clone(),
            tensors,
            velocities: vel_names,
            payload_len: payload.len() as u64,
        };
        let hj = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(10 + hj.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(hj.len() as u32).to_le_bytes());
        out.extend_from_slice(&hj);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let body = &bytes[10..];
        if body.len() < hlen {
            return Err(Error::Integrity(format!(
                "truncated header: {} of {hlen} bytes",
                body.len()
            )));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        if payload.len() as u64 != header.payload_len {
            return Err(Error::Integrity(format!(
                "payload is {} bytes, header records {}",
                payload.len(),
                header.payload_len
            )));
        }
        let mut params = Vec::new();
        let mut velocities = Vec::new();
        for e in &header.tensors {
            let expect = numel(&e.shape) as u64 * 4;
            let end = e.offset.checked_add(e.length);
            if e.length != expect || end.is_none_or(|end| end > header.payload_len) {
                return Err(Error::Integrity(format!(
                    "tensor {} has length {} at offset {} (shape {:?} needs {expect}, payload {})",
                    e.name, e.length, e.offset, e.shape, header.payload_len
                )));
            }
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            if e.name.starts_with(VELOCITY_PREFIX) {
                velocities.push(t);
            } else {
                params.push((e.name.clone(), t));
            }
        }
        if velocities.len() > params.len() {
            return Err(Error::Integrity(
                "more velocity buffers than parameters".into(),
            ));
        }
        for ((name, p), v) in params.iter().zip(&velocities) {
            if p.shape() != v.shape() {
                return Err(Error::Integrity(format!(
                    "velocity of {name} has a different shape"
                )));
            }
        }
        Ok(Self {
            version,
            config: header.config,
            params,
            velocities,
            state: header.state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copy every tensor into `store`. Names and shapes are checked first so
    /// a mismatch leaves `store` untouched.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        let mut ids = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            let id = store.id(name).ok_or_else(|| {
                Error::Config(format!("checkpoint tensor {name} unknown to this model"))
            })?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            ids.push(id);
        }
        for (id, (_, t)) in ids.into_iter().zip(&self.params) {
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

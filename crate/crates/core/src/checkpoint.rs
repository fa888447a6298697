//! Self-describing checkpoint container.
//!
//! Layout: 4-byte magic `ARTC`, u32 LE format version, u64 LE header
//! length, JSON header (kind, master seed, config snapshot, tensor table),
//! then the raw tensor payloads as 32-bit little-endian floats in header
//! order. The writer records nothing time- or host-dependent, so identical
//! inputs always produce identical bytes.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};

const MAGIC: &[u8; 4] = b"ARTC";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    /// Which pipeline stage produced this checkpoint ("vqae",
    /// "token-model", "uncond-diffusion", "restorer").
    kind: String,
    /// Master seed of the producing run.
    seed: u64,
    /// Stage config snapshot, stored verbatim.
    config: serde_json::Value,
    tool_version: String,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// In-memory checkpoint: header fields plus named weight tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Snapshots every parameter of `store` (f64 narrowed to f32).
    pub fn from_store<C: Serialize>(
        kind: &str,
        seed: u64,
        config: &C,
        store: &ParamStore,
    ) -> Result<Self> {
        let config = serde_json::to_value(config).map_err(|e| {
            Error::invalid(format!("config not serializable: {e}"))
        })?;
        let tensors = store
            .iter()
            .map(|(name, value)| NamedTensor {
                name: name.to_string(),
                shape: value.shape().to_vec(),
                data: value.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Ok(Checkpoint {
            kind: kind.to_string(),
            seed,
            config,
            tensors,
        })
    }

    /// Copies weights into a freshly constructed store of the same
    /// architecture, validating names and shapes both ways.
    pub fn load_into_store(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.tensors.len() {
            return Err(Error::CorruptData(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            let id = store.find(&t.name).ok_or_else(|| {
                Error::CorruptData(format!("checkpoint tensor {} unknown to the model", t.name))
            })?;
            let current = store.get(id);
            if current.shape() != t.shape.as_slice() {
                return Err(Error::CorruptData(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    t.name,
                    t.shape,
                    current.shape()
                )));
            }
            let values: Vec<f64> = t.data.iter().map(|&v| v as f64).collect();
            *store.get_mut(id) = ArrayD::from_shape_vec(IxDyn(&t.shape), values)
                .expect("validated shape");
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| (t.shape.as_slice(), t.data.as_slice()))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    /// Deserializes the config snapshot into a concrete stage config.
    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| {
            Error::CorruptData(format!("config snapshot does not parse: {e}"))
        })
    }

    /// Serializes to the container byte format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            seed: self.seed,
            config: self.config.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorMeta {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + header_bytes.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in &self.tensors {
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |detail: &str| Error::corrupt(origin, detail);
        if bytes.len() < 16 {
            return Err(corrupt("file shorter than the fixed header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(corrupt("bad magic, not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(&format!(
                "format version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body_start = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len());
        let Some(body_start) = body_start else {
            return Err(corrupt("header length exceeds file size"));
        };
        let header: Header = serde_json::from_slice(&bytes[16..body_start])
            .map_err(|e| corrupt(&format!("header does not parse: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(corrupt("header/file version disagreement"));
        }
        let expected: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 4)
            .sum();
        if bytes.len() - body_start != expected {
            return Err(corrupt(&format!(
                "tensor payload is {} bytes, header promises {expected}",
                bytes.len() - body_start
            )));
        }
        let mut offset = body_start;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for meta in header.tensors {
            let count: usize = meta.shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f32::from_le_bytes(
                    bytes[offset..offset + 4].try_into().unwrap(),
                ));
                offset += 4;
            }
            tensors.push(NamedTensor {
                name: meta.name,
                shape: meta.shape,
                data,
            });
        }
        Ok(Checkpoint {
            kind: header.kind,
            seed: header.seed,
            config: header.config,
            tensors,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

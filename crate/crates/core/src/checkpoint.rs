//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `HSCKPT01`, a little-endian `u64` manifest
//! length, the manifest as JSON (tensor names, shapes, dtype, byte offsets,
//! model and frontend config), then the raw little-endian tensor payloads in
//! manifest order. Writing the same parameters twice gives identical bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::FrontendConfig;
use crate::model::{ModelConfig, ModelParams};
use crate::Real;

const MAGIC: &[u8; 8] = b"HSCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint holds {found} tensors, expected {expected}")]
    DtypeMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub frontend: FrontendConfig,
    pub parameter_count: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub model: ModelConfig,
    pub frontend: FrontendConfig,
    pub params: ModelParams<F>,
    pub meta: serde_json::Value,
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (name, t) in self.params.tensors() {
            let offset = payload.len();
            for v in t.iter() {
                v.write_le(&mut payload);
            }
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                len: payload.len() - offset,
            });
        }
        let manifest = Manifest {
            format: 1,
            dtype: F::DTYPE.to_string(),
            model: self.model.clone(),
            frontend: self.frontend.clone(),
            parameter_count: self.params.parameter_count(),
            tensors,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let fmt = |m: &str| CheckpointError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fmt("bad magic"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..).ok_or_else(|| fmt("truncated header"))?;
        if body.len() < mlen {
            return Err(fmt("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if manifest.dtype != F::DTYPE {
            return Err(CheckpointError::DtypeMismatch {
                expected: F::DTYPE.into(),
                found: manifest.dtype,
            });
        }
        let payload = &body[mlen..];
        let mut params = ModelParams::<F>::init(&manifest.model, 0)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let mut slots = params.tensors_mut();
        if slots.len() != manifest.tensors.len() {
            return Err(fmt("tensor count does not match the model config"));
        }
        let mut expected_end = 0;
        for ((name, t), entry) in slots.iter_mut().zip(&manifest.tensors) {
            if *name != entry.name || t.shape() != entry.shape.as_slice() {
                return Err(CheckpointError::Format(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    t.shape()
                )));
            }
            if entry.offset != expected_end || entry.len != t.len() * F::BYTES {
                return Err(CheckpointError::Format(format!("bad extent for {}", entry.name)));
            }
            let raw = payload
                .get(entry.offset..entry.offset + entry.len)
                .ok_or_else(|| fmt("truncated payload"))?;
            for (v, chunk) in t.iter_mut().zip(raw.chunks_exact(F::BYTES)) {
                *v = F::read_le(chunk);
            }
            expected_end = entry.offset + entry.len;
        }
        if expected_end != payload.len() {
            return Err(fmt("trailing payload bytes"));
        }
        drop(slots);
        if !params.is_finite() {
            return Err(fmt("non-finite parameter values"));
        }
        Ok(Self {
            model: manifest.model,
            frontend: manifest.frontend,
            params,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            linguistic_dim: 12,
            acoustic_dim: 6,
            attention: AttentionConfig {
                model_dim: 8,
                heads: 2,
                fusion_layers: 2,
                transformer_layers: 1,
                ffn_hidden: 16,
                dropout_rate: 0.1,
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut params = ModelParams::<f32>::init(&small(), 5).unwrap();
        params.pool_b[()] = -0.0;
        params.cls_b[()] = f32::MIN_POSITIVE / 4.0;
        let ck = Checkpoint {
            model: small(),
            frontend: FrontendConfig::default(),
            params,
            meta: serde_json::json!({"epoch": 3}),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        for ((_, a), (_, b)) in ck.params.tensors().into_iter().zip(back.params.tensors()) {
            let ab: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta["epoch"], 3);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ck = Checkpoint {
            model: small(),
            frontend: FrontendConfig::default(),
            params: ModelParams::<f32>::init(&small(), 5).unwrap(),
            meta: serde_json::Value::Null,
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[1..]).is_err());
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(CheckpointError::DtypeMismatch { .. })
        ));
    }
}

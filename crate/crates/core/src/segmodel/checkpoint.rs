//! Checkpoint container.
//!
//! Layout: magic `b"DLCK"`, little-endian `u32` version, little-endian `u64`
//! index length, the UTF-8 JSON index, then the tensor blobs back to back.
//! Each blob is a complete `DLF1` (or `DLD1`) encoding; the index records its
//! name, format, byte offset from the start of the blob region, byte length
//! and shape, plus free-form metadata.
//!
//! Model checkpoints name parameters `param/<name>` and Adam moments
//! `adam_m/<name>` / `adam_v/<name>`. When written with `exact`, the same
//! tensors are repeated in `DLD1` under an `exact/` prefix and reading prefers
//! them, so a resumed run continues bit-for-bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, ModelConfig, ModelError, ModelParams, PARAM_NAMES};
use crate::dataio::{decode_f32, decode_f64, encode_f32, encode_f64};
use crate::numkit::Tensor;

const MAGIC: &[u8; 4] = b"DLCK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobFormat {
    Dlf1,
    Dld1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub format: BlobFormat,
    pub offset: u64,
    pub length: u64,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    meta: serde_json::Value,
    tensors: Vec<CheckpointEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    tensors: Vec<(String, BlobFormat, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    model: ModelConfig,
    adam: Option<AdamMeta>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    step: u64,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    /// Adds or replaces a named tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, format: BlobFormat) {
        let name = name.into();
        self.tensors.retain(|(n, _, _)| *n != name);
        self.tensors.push((name, format, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, _, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn encode(&self) -> Result<Vec<u8>, ModelError> {
        let mut blobs = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, format, t) in &self.tensors {
            let bytes = match format {
                BlobFormat::Dlf1 => encode_f32(t),
                BlobFormat::Dld1 => encode_f64(t),
            };
            entries.push(CheckpointEntry {
                name: name.clone(),
                format: *format,
                offset: blobs.len() as u64,
                length: bytes.len() as u64,
                shape: t.shape().to_vec(),
            });
            blobs.extend_from_slice(&bytes);
        }
        let index = serde_json::to_vec(&Index {
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + index.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(&index);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(ModelError::Checkpoint("missing DLCK header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let index_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let index_bytes = bytes
            .get(16..16 + index_len)
            .ok_or_else(|| ModelError::Checkpoint("truncated index".into()))?;
        let index: Index = serde_json::from_slice(index_bytes)?;
        let blobs = &bytes[16 + index_len..];
        let mut tensors = Vec::with_capacity(index.tensors.len());
        for e in index.tensors {
            let (start, len) = (e.offset as usize, e.length as usize);
            let blob = blobs
                .get(start..start + len)
                .ok_or_else(|| ModelError::Checkpoint(format!("blob {} out of range", e.name)))?;
            let t = match e.format {
                BlobFormat::Dlf1 => decode_f32(blob)?,
                BlobFormat::Dld1 => decode_f64(blob)?,
            };
            if t.shape() != e.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!("blob {} shape disagrees with index", e.name)));
            }
            tensors.push((e.name, e.format, t));
        }
        Ok(Self {
            meta: index.meta,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::decode(&fs::read(path)?)
    }

    /// Model parameters and optional optimizer state. `meta` is stored under
    /// the `extra` key next to the model and optimizer configuration.
    pub fn from_model(params: &ModelParams, adam: Option<&AdamState>, exact: bool, extra: serde_json::Value) -> Self {
        let meta = ModelMeta {
            model: params.config().clone(),
            adam: adam.map(|a| AdamMeta {
                config: a.config.clone(),
                step: a.step,
            }),
        };
        let mut meta = serde_json::to_value(meta).expect("plain data");
        meta["extra"] = extra;
        let mut ck = Checkpoint::new(meta);
        let mut put = |prefix: &str, tensors: &[Tensor]| {
            for (name, t) in PARAM_NAMES.iter().zip(tensors) {
                ck.insert(format!("{prefix}/{name}"), t.clone(), BlobFormat::Dlf1);
                if exact {
                    ck.insert(format!("exact/{prefix}/{name}"), t.clone(), BlobFormat::Dld1);
                }
            }
        };
        put("param", params.tensors());
        if let Some(a) = adam {
            put("adam_m", &a.m);
            put("adam_v", &a.v);
        }
        ck
    }

    /// Inverse of [`Checkpoint::from_model`].
    pub fn to_model(&self) -> Result<(ModelParams, Option<AdamState>), ModelError> {
        let meta: ModelMeta = serde_json::from_value(self.meta.clone())?;
        let fetch = |prefix: &str| -> Result<Vec<Tensor>, ModelError> {
            PARAM_NAMES
                .iter()
                .map(|name| {
                    self.get(&format!("exact/{prefix}/{name}"))
                        .or_else(|| self.get(&format!("{prefix}/{name}")))
                        .cloned()
                        .ok_or_else(|| ModelError::Checkpoint(format!("missing {prefix}/{name}")))
                })
                .collect()
        };
        let params = ModelParams::from_tensors(&meta.model, fetch("param")?)?;
        let adam = match meta.adam {
            Some(a) => Some(AdamState {
                config: a.config,
                step: a.step,
                m: fetch("adam_m")?,
                v: fetch("adam_v")?,
            }),
            None => None,
        };
        Ok((params, adam))
    }

    pub fn extra(&self) -> &serde_json::Value {
        &self.meta["extra"]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmodel::adam_step;

    fn trained() -> (ModelParams, AdamState) {
        let cfg = ModelConfig::default();
        let mut p = ModelParams::init(5, &cfg).unwrap();
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &ModelParams::init(6, &cfg).unwrap(), &mut st).unwrap();
        (p, st)
    }

    #[test]
    fn exact_round_trip() {
        let (p, st) = trained();
        let ck = Checkpoint::from_model(&p, Some(&st), true, serde_json::json!({"t": 3}));
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        let (p2, st2) = back.to_model().unwrap();
        assert_eq!(p2, p);
        assert_eq!(st2.unwrap(), st);
        assert_eq!(back.extra()["t"], 3);
    }

    #[test]
    fn single_precision_round_trip() {
        let (p, _) = trained();
        let ck = Checkpoint::from_model(&p, None, false, serde_json::Value::Null);
        let (p2, adam) = Checkpoint::decode(&ck.encode().unwrap()).unwrap().to_model().unwrap();
        assert!(adam.is_none());
        for (a, b) in p.flat().iter().zip(p2.flat()) {
            assert!((a - b).abs() <= a.abs() * 2f64.powi(-20));
        }
    }

    #[test]
    fn index_offsets_point_at_dlf1_blobs() {
        let (p, st) = trained();
        let bytes = Checkpoint::from_model(&p, Some(&st), false, serde_json::Value::Null)
            .encode()
            .unwrap();
        let index_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let index: serde_json::Value = serde_json::from_slice(&bytes[16..16 + index_len]).unwrap();
        let entries = index["tensors"].as_array().unwrap();
        assert_eq!(entries.len(), 18);
        let blobs = &bytes[16 + index_len..];
        for e in entries {
            let off = e["offset"].as_u64().unwrap() as usize;
            assert_eq!(&blobs[off..off + 4], b"DLF1");
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(Checkpoint::decode(b"nope").is_err());
        let (p, _) = trained();
        let mut bytes = Checkpoint::from_model(&p, None, false, serde_json::Value::Null)
            .encode()
            .unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::decode(&bytes).is_err());
        let mut ck = Checkpoint::new(serde_json::json!({"model": ModelConfig::default()}));
        ck.insert("param/conv1.weight", Tensor::zeros(&[8, 1, 3, 3]), BlobFormat::Dlf1);
        assert!(matches!(ck.to_model(), Err(ModelError::Checkpoint(_))));
    }
}

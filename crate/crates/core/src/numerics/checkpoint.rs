//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "CHRDCKPT"
//! version   u32      currently 1
//! hdr_len   u32      byte length of the JSON header
//! header    JSON     metadata, optimizer scalars, tensor directory
//! payload   f64*     tensors in directory order, row-major
//! checksum  u64      FNV-1a over header and payload
//! ```
//!
//! The directory lists every tensor as `{name, kind, shape}` where `kind` is
//! `param`, `adam_m` or `adam_v`. Moment tensors appear in parameter order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamWConfig, NumericsError, OptimizerState, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"CHRDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, String>,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn corrupt(msg: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint(msg.into())
}

pub fn encode_checkpoint(
    metadata: &BTreeMap<String, String>,
    store: &ParamStore,
    optimizer: Option<&OptimizerState>,
) -> Vec<u8> {
    let mut tensors: Vec<TensorEntry> = store
        .ids()
        .map(|id| TensorEntry {
            name: store.name(id).to_string(),
            kind: "param".into(),
            shape: store.value(id).shape().to_vec(),
        })
        .collect();
    let mut payload_tensors: Vec<&Tensor> = store.ids().map(|id| store.value(id)).collect();
    if let Some(opt) = optimizer {
        for (kind, moments) in [("adam_m", &opt.m), ("adam_v", &opt.v)] {
            for (id, t) in store.ids().zip(moments) {
                tensors.push(TensorEntry {
                    name: store.name(id).to_string(),
                    kind: kind.into(),
                    shape: t.shape().to_vec(),
                });
                payload_tensors.push(t);
            }
        }
    }
    let header = Header {
        metadata: metadata.clone(),
        optimizer: optimizer.map(|o| OptimizerHeader {
            step: o.step,
            beta1: o.config.beta1,
            beta2: o.config.beta2,
            eps: o.config.eps,
            weight_decay: o.config.weight_decay,
        }),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    let body_start = out.len();
    out.extend_from_slice(&header_bytes);
    for t in payload_tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&out[body_start..], FNV_OFFSET);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, NumericsError> {
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let hdr_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    if fnv1a(body, FNV_OFFSET) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    if hdr_len > body.len() {
        return Err(corrupt("header length exceeds file"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hdr_len]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let mut cursor = &body[hdr_len..];
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        if cursor.len() < n * 8 {
            return Err(corrupt(format!("payload truncated at tensor {}", entry.name)));
        }
        let data = cursor[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        cursor = &cursor[n * 8..];
        let t = Tensor::new(entry.shape, data)?;
        match entry.kind.as_str() {
            "param" => params.push((entry.name, t)),
            "adam_m" => m.push(t),
            "adam_v" => v.push(t),
            other => return Err(corrupt(format!("unknown tensor kind {other}"))),
        }
    }
    if !cursor.is_empty() {
        return Err(corrupt("trailing payload bytes"));
    }
    let optimizer = match header.optimizer {
        Some(o) => {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(corrupt("optimizer moments do not match parameters"));
            }
            Some(OptimizerState {
                config: AdamWConfig {
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    weight_decay: o.weight_decay,
                },
                step: o.step,
                m,
                v,
            })
        }
        None => None,
    };
    Ok(Checkpoint {
        metadata: header.metadata,
        params,
        optimizer,
    })
}

pub fn save_checkpoint(
    path: &Path,
    metadata: &BTreeMap<String, String>,
    store: &ParamStore,
    optimizer: Option<&OptimizerState>,
) -> Result<(), NumericsError> {
    std::fs::write(path, encode_checkpoint(metadata, store, optimizer))
        .map_err(|e| NumericsError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NumericsError> {
    let bytes =
        std::fs::read(path).map_err(|e| NumericsError::Io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

impl Checkpoint {
    /// Copies stored values into a store with the same parameter layout.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), NumericsError> {
        if self.params.len() != store.len() {
            return Err(NumericsError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| corrupt(format!("model has no parameter {name}")))?;
            if store.value(id).shape() != t.shape() {
                return Err(corrupt(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ParamStore, OptimizerState) {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap());
        s.add("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let mut o = OptimizerState::new(&s, AdamWConfig::default());
        o.step = 7;
        o.m[1].data_mut()[2] = 0.5;
        o.v[0].data_mut()[0] = 2.0;
        (s, o)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (s, o) = sample();
        let mut meta = BTreeMap::new();
        meta.insert("d_model".to_string(), "64".to_string());
        let bytes = encode_checkpoint(&meta, &s, Some(&o));
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.metadata, meta);
        assert_eq!(ck.optimizer.as_ref().unwrap(), &o);
        let mut fresh = ParamStore::new();
        fresh.add("a", Tensor::zeros(&[2, 2]));
        fresh.add("b", Tensor::zeros(&[3]));
        ck.restore_into(&mut fresh).unwrap();
        for id in s.ids() {
            assert_eq!(s.value(id), fresh.value(id));
        }
    }

    #[test]
    fn corruption_detected() {
        let (s, o) = sample();
        let mut bytes = encode_checkpoint(&BTreeMap::new(), &s, Some(&o));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bytes), Err(NumericsError::Checkpoint(_))));
        assert!(decode_checkpoint(b"garbage").is_err());
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let (s, _) = sample();
        let ck = decode_checkpoint(&encode_checkpoint(&BTreeMap::new(), &s, None)).unwrap();
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(&[4]));
        other.add("b", Tensor::zeros(&[3]));
        let err = ck.restore_into(&mut other).unwrap_err().to_string();
        assert!(err.contains("parameter a"), "{err}");
    }
}

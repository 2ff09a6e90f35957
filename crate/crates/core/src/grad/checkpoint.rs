//! Binary checkpoint: `MAGIC`, a little-endian `u64` header length, a JSON
//! header, then every entry's values as little-endian floats in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optim::AdamW;
use super::params::{ParamGroup, ParamStore};
use super::{Precision, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"PSQCKPT1";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file")]
    BadMagic { path: String },
    #[error("{path}: malformed header: {source}")]
    Header {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: truncated blob for {name}")]
    Truncated { path: String, name: String },
    #[error("checkpoint has no entry {0}")]
    Missing(String),
    #[error("entry {name}: checkpoint shape {found:?}, model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub precision: Precision,
    pub group: Option<ParamGroup>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub precision: Precision,
    /// Free-form model/run configuration echoed into the header.
    pub config: serde_json::Value,
    pub entries: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    precision: Precision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<ParamGroup>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    seed: u64,
    step: u64,
    precision: Precision,
    config: serde_json::Value,
    entries: Vec<HeaderEntry>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, seed: u64, step: u64, config: serde_json::Value) -> Self {
        let entries = store
            .entries()
            .iter()
            .map(|e| CheckpointEntry {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                precision: T::PRECISION,
                group: Some(e.group),
                data: e.tensor.to_f64_vec(),
            })
            .collect();
        Self {
            seed,
            step,
            precision: T::PRECISION,
            config,
            entries,
        }
    }

    /// Appends optimizer moments so training can resume exactly.
    pub fn with_optimizer<T: Scalar>(mut self, opt: &AdamW, store: &ParamStore<T>) -> Self {
        let (m, v) = opt.moments();
        for (prefix, moments) in [(ADAM_M, m), (ADAM_V, v)] {
            for (e, data) in store.entries().iter().zip(moments) {
                self.entries.push(CheckpointEntry {
                    name: format!("{prefix}{}", e.name),
                    shape: e.tensor.shape().to_vec(),
                    precision: Precision::F64,
                    group: None,
                    data: data.clone(),
                });
            }
        }
        self
    }

    pub fn entry(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn checked(&self, name: &str, shape: &[usize]) -> Result<&CheckpointEntry, CheckpointError> {
        let e = self.entry(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if e.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: e.shape.clone(),
            });
        }
        Ok(e)
    }

    /// Overwrites every parameter of `store` from the entry with its name.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let shape = store.get(id).shape().to_vec();
            let e = self.checked(&name, &shape)?;
            *store.get_mut(id) = Tensor::from_f64(&shape, &e.data).expect("shape checked");
        }
        Ok(())
    }

    pub fn has_optimizer(&self) -> bool {
        self.entries.iter().any(|e| e.name.starts_with(ADAM_M))
    }

    pub fn restore_optimizer<T: Scalar>(&self, opt: &mut AdamW, store: &ParamStore<T>) -> Result<(), CheckpointError> {
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for e in store.entries() {
            m.push(self.checked(&format!("{ADAM_M}{}", e.name), e.tensor.shape())?.data.clone());
            v.push(self.checked(&format!("{ADAM_V}{}", e.name), e.tensor.shape())?.data.clone());
        }
        let ok = opt.restore(m, v, self.step);
        debug_assert!(ok, "moment shapes were checked against the store");
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let header = Header {
        seed: ckpt.seed,
        step: ckpt.step,
        precision: ckpt.precision,
        config: ckpt.config.clone(),
        entries: ckpt
            .entries
            .iter()
            .map(|e| HeaderEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                precision: e.precision,
                group: e.group,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(json.len() + 16);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for e in &ckpt.entries {
        for &v in &e.data {
            match e.precision {
                Precision::F32 => (v as f32).write_le(&mut buf),
                Precision::F64 => v.write_le(&mut buf),
            }
        }
    }
    // Write to a sibling file first so an interrupted save never truncates
    // the previous checkpoint.
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(&buf).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let p = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io { path: p.clone(), source })?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic { path: p });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or(CheckpointError::BadMagic { path: p.clone() })?;
    let header: Header = serde_json::from_slice(body).map_err(|source| CheckpointError::Header { path: p.clone(), source })?;
    let mut pos = 16 + hlen;
    let mut entries = Vec::with_capacity(header.entries.len());
    for h in header.entries {
        let n: usize = h.shape.iter().product();
        let width = match h.precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let blob = bytes.get(pos..pos + n * width).ok_or_else(|| CheckpointError::Truncated {
            path: p.clone(),
            name: h.name.clone(),
        })?;
        let data = blob
            .chunks_exact(width)
            .map(|c| match h.precision {
                Precision::F32 => f32::read_le(c) as f64,
                Precision::F64 => f64::read_le(c),
            })
            .collect();
        pos += n * width;
        entries.push(CheckpointEntry {
            name: h.name,
            shape: h.shape,
            precision: h.precision,
            group: h.group,
            data,
        });
    }
    Ok(Checkpoint {
        seed: header.seed,
        step: header.step,
        precision: header.precision,
        config: header.config,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{AdamWConfig, Gradients, StepDecay};

    #[test]
    fn round_trip_with_optimizer() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", ParamGroup::Backbone, Tensor::from_f64(&[2, 2], &[0.1, -0.2, 0.3, 1e-7]).unwrap());
        store.add("b", ParamGroup::Transformer, Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let mut opt = AdamW::new(&store, AdamWConfig::default(), StepDecay::default());
        let mut g = Gradients::zeros_like(&store);
        g.get_mut(a)[1] = 0.5;
        opt.update(&mut store, &g);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::from_store(&store, 7, opt.step_count(), serde_json::json!({"d_model": 8}))
            .with_optimizer(&opt, &store);
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);

        let mut fresh = ParamStore::<f32>::new();
        fresh.add("a", ParamGroup::Backbone, Tensor::zeros(&[2, 2]));
        fresh.add("b", ParamGroup::Transformer, Tensor::zeros(&[3]));
        back.load_into(&mut fresh).unwrap();
        assert_eq!(fresh.get(a).data(), store.get(a).data());
        let mut opt2 = AdamW::new(&fresh, AdamWConfig::default(), StepDecay::default());
        back.restore_optimizer(&mut opt2, &fresh).unwrap();
        assert_eq!(opt2.step_count(), 1);
        assert_eq!(opt2.moments().0, opt.moments().0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut store = ParamStore::<f64>::new();
        store.add("a", ParamGroup::Backbone, Tensor::zeros(&[2]));
        let ck = Checkpoint::from_store(&store, 0, 0, serde_json::Value::Null);
        let mut other = ParamStore::<f64>::new();
        other.add("a", ParamGroup::Backbone, Tensor::zeros(&[3]));
        assert!(matches!(ck.load_into(&mut other), Err(CheckpointError::ShapeMismatch { .. })));
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic { .. })));
    }
}

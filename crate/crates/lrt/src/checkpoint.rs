//! Checkpoint files.
//!
//! Layout: the magic line `LRTCKPT1\n`, a little-endian `u64` header length,
//! a TOML header (run config, progress, tensor names in file order), then for
//! each named tensor a `u32` name length, the name, and the tensor in the
//! core tensor encoding. Optimizer moments are stored as `adam.m.<param>` and
//! `adam.v.<param>`.

use std::path::Path;

use lrt_core::backbone::Model;
use lrt_core::tensor::{decode_tensor, encode_tensor};
use lrt_core::trainer::AdamW;
use lrt_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::Error;

pub const MAGIC: &[u8] = b"LRTCKPT1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: usize,
    total_steps: usize,
    adam_t: u64,
    tensors: Vec<String>,
    config: RunConfig,
}

/// Model, optimizer and progress of a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Steps completed.
    pub step: usize,
    pub total_steps: usize,
    pub model: Model,
    pub optimizer: AdamW,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.model.params;
        let mut named: Vec<(String, &Tensor)> = store.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
        for (id, name, _) in store.iter() {
            named.push((format!("adam.m.{name}"), &self.optimizer.m[id.index()]));
        }
        for (id, name, _) in store.iter() {
            named.push((format!("adam.v.{name}"), &self.optimizer.v[id.index()]));
        }
        let header = Header {
            step: self.step,
            total_steps: self.total_steps,
            adam_t: self.optimizer.t,
            tensors: named.iter().map(|(n, _)| n.clone()).collect(),
            config: self.config.clone(),
        };
        let text = toml::to_string(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (name, t) in named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(t, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing LRTCKPT1 magic"))?;
        let (len, rest) = split(rest, 8).ok_or_else(|| bad("truncated header length"))?;
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        let (text, mut rest) = split(rest, len).ok_or_else(|| bad("truncated header"))?;
        let text = std::str::from_utf8(text).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        header.config.validate()?;

        let mut tensors = std::collections::HashMap::new();
        for name in &header.tensors {
            let (n, r) = split(rest, 4).ok_or_else(|| bad("truncated tensor name"))?;
            let n = u32::from_le_bytes(n.try_into().expect("4 bytes")) as usize;
            let (stored, r) = split(r, n).ok_or_else(|| bad("truncated tensor name"))?;
            if stored != name.as_bytes() {
                return Err(Error::Checkpoint(format!("expected tensor {name:?} in header order")));
            }
            let (t, used) = decode_tensor(r).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            tensors.insert(name.clone(), t);
            rest = &r[used..];
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }

        let template = lrt_core::backbone::layout(&header.config.model);
        let mut store = ParamStore::new();
        for spec in &template {
            let t = tensors
                .remove(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", spec.name)))?;
            store.insert(spec.name.clone(), spec.kind, t);
        }
        let model = Model::from_store(header.config.model.clone(), store).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut optimizer = AdamW::new(&model.params);
        optimizer.weight_decay = header.config.train.weight_decay;
        optimizer.t = header.adam_t;
        for (id, name, t) in model.params.iter() {
            for (prefix, slot) in [("adam.m.", &mut optimizer.m), ("adam.v.", &mut optimizer.v)] {
                let key = format!("{prefix}{name}");
                let moment = tensors.remove(&key).ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
                if moment.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("{key} has shape {:?}, expected {:?}", moment.shape(), t.shape())));
                }
                slot[id.index()] = moment;
            }
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra:?}")));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            total_steps: header.total_steps,
            model,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::Io(tmp.clone(), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::Io(path.to_path_buf(), e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io(path.to_path_buf(), e))?;
        Self::from_bytes(&bytes)
    }
}

fn split(b: &[u8], n: usize) -> Option<(&[u8], &[u8])> {
    (b.len() >= n).then(|| b.split_at(n))
}

//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SEQTRACE" | u32 version | u64 header length | header JSON
//! u32 tensor count
//! per tensor: u32 path length | path | u8 dtype (0 = f32) | u32 rank |
//!             u64 dims… | raw f32 data
//! ```
//!
//! Tensors are written in path order; optimizer state lives under the
//! `momentum/` prefix.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Momentum, TrainConfig};
use crate::decoder::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::synth::config_hash;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SEQTRACE";
const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Digest of the model configuration and vocabulary.
    pub config_hash: String,
    pub vocab: Vocabulary,
    pub epoch: usize,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Config hash of the dataset the model was trained on.
    pub data_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Short hex digest of a checkpoint file's bytes.
pub fn file_digest(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(&Sha256::digest(bytes)[..8])
}

pub fn model_hash(config: &ModelConfig, vocab: &Vocabulary) -> String {
    config_hash(&(config, vocab))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Compat("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        momentum: Option<&Momentum>,
        epoch: usize,
        train: Option<&TrainConfig>,
        data_hash: &str,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        for (i, (_, p)) in model.params.iter().enumerate() {
            tensors.insert(p.name.clone(), p.value.clone());
            if let Some(m) = momentum {
                tensors.insert(format!("{MOMENTUM_PREFIX}{}", p.name), m.0[i].clone());
            }
        }
        Checkpoint {
            header: CheckpointHeader {
                config_hash: model_hash(&model.config, &model.vocab),
                vocab: model.vocab.clone(),
                epoch,
                model: model.config.clone(),
                train: train.cloned(),
                data_hash: data_hash.to_string(),
            },
            tensors,
        }
    }

    /// Rebuilds the model (and momentum when stored).
    pub fn to_model(&self) -> Result<(Model, Option<Momentum>)> {
        let h = &self.header;
        if model_hash(&h.model, &h.vocab) != h.config_hash {
            return Err(Error::Compat("checkpoint config hash does not match its contents".into()));
        }
        let mut model = Model::new(&h.model, &h.vocab, 0)?;
        let mut momentum = Vec::new();
        let mut any_momentum = false;
        for (_, p) in model.params.iter_mut() {
            let t = self
                .tensors
                .get(&p.name)
                .ok_or_else(|| Error::Compat(format!("checkpoint lacks tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Compat(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
            match self.tensors.get(&format!("{MOMENTUM_PREFIX}{}", p.name)) {
                Some(m) => {
                    any_momentum = true;
                    momentum.push(m.clone());
                }
                None => momentum.push(Tensor::zeros(p.value.shape())),
            }
        }
        let expected = model.params.len() * if any_momentum { 2 } else { 1 };
        if self.tensors.len() != expected {
            return Err(Error::Compat(format!(
                "checkpoint holds {} tensors, model needs {expected}",
                self.tensors.len()
            )));
        }
        Ok((model, any_momentum.then_some(Momentum(momentum))))
    }

    /// Fails with a compatibility error when the dataset vocabulary differs.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if &self.header.vocab != vocab {
            return Err(Error::Compat(format!(
                "checkpoint vocabulary {:?} differs from data vocabulary {:?}",
                self.header.vocab.labels(),
                vocab.labels()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (path, t) in &self.tensors {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.push(0);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Compat("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Compat(format!("checkpoint version {version} (expected {VERSION})")));
        }
        let header_len = r.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Compat(format!("bad checkpoint header: {e}")))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let path = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Compat("tensor path is not UTF-8".into()))?;
            if r.u8()? != 0 {
                return Err(Error::Compat(format!("tensor {path} has an unsupported dtype")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Compat("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(path, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Compat("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

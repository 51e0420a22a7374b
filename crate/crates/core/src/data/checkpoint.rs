//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "VEDT" | u32 version | u64 header_len | header JSON | u64 payload_len | payload (f32 LE) | u32 CRC32(payload)
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::heads::{PoolerConfig, PoolerParams};
use crate::model::{Parameterized, VeditParams};
use crate::training::{AdamW, TrainState, Trainer};
use crate::types::{ModelConfig, RngSeed};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VEDT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENT_PREFIX: [&str; 2] = ["optim.m.", "optim.v."];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_config: ModelConfig,
    #[serde(default)]
    pub pooler_config: Option<PoolerConfig>,
    #[serde(default)]
    pub train_state: Option<TrainState>,
    /// Free-form run description (task, data paths, hyper-parameters).
    #[serde(default)]
    pub run: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    fn from_tensor(name: String, t: &Tensor) -> Result<Self> {
        Ok(Self {
            name,
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
        })
    }

    fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub pooler_config: Option<PoolerConfig>,
    pub train_state: Option<TrainState>,
    pub run: Option<serde_json::Value>,
    pub tensors: Vec<NamedTensor>,
}

fn push_params(out: &mut Vec<NamedTensor>, params: Vec<(String, Var)>) -> Result<()> {
    for (name, var) in params {
        out.push(NamedTensor::from_tensor(name, var.as_tensor())?);
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_model(model: &VeditParams) -> Result<Self> {
        let mut tensors = Vec::new();
        push_params(&mut tensors, model.named_params())?;
        Ok(Self {
            model_config: model.config.clone(),
            pooler_config: None,
            train_state: None,
            run: None,
            tensors,
        })
    }

    /// Model, head, optimizer moments and progress of a training run.
    pub fn from_trainer(trainer: &Trainer, run: Option<serde_json::Value>) -> Result<Self> {
        let mut ck = Self::from_model(&trainer.model)?;
        let mut head = Vec::new();
        trainer.head.collect_params("head", &mut head);
        push_params(&mut ck.tensors, head)?;
        for (name, (m, v)) in trainer.optimizer.moments() {
            ck.tensors.push(NamedTensor::from_tensor(format!("{}{name}", MOMENT_PREFIX[0]), m)?);
            ck.tensors.push(NamedTensor::from_tensor(format!("{}{name}", MOMENT_PREFIX[1]), v)?);
        }
        ck.pooler_config = Some(trainer.head.config.clone());
        ck.train_state = Some(trainer.state);
        ck.run = run;
        Ok(ck)
    }

    fn lookup(&self) -> BTreeMap<&str, &NamedTensor> {
        self.tensors.iter().map(|t| (t.name.as_str(), t)).collect()
    }

    fn assign(&self, params: &[(String, Var)]) -> Result<()> {
        let table = self.lookup();
        for (name, var) in params {
            let t = table.get(name.as_str()).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape != var.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name}: stored {:?}, model expects {:?}",
                    t.shape,
                    var.dims()
                )));
            }
            var.set(&t.to_tensor(var.dtype())?)?;
        }
        Ok(())
    }

    fn warn_unknown(&self, known: &HashSet<String>) {
        for t in &self.tensors {
            let is_moment = MOMENT_PREFIX.iter().any(|p| t.name.starts_with(p));
            if !known.contains(&t.name) && !is_moment {
                log::warn!("ignoring unknown checkpoint tensor {}", t.name);
            }
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn model(&self, dtype: DType) -> Result<VeditParams> {
        let model = VeditParams::new(&self.model_config, RngSeed(0), dtype)?;
        let params = model.named_params();
        self.assign(&params)?;
        let mut known: HashSet<String> = params.into_iter().map(|(n, _)| n).collect();
        if let Some(pc) = &self.pooler_config {
            let head = PoolerParams::new(pc, RngSeed(0), dtype)?;
            let mut hp = Vec::new();
            head.collect_params("head", &mut hp);
            known.extend(hp.into_iter().map(|(n, _)| n));
        }
        self.warn_unknown(&known);
        Ok(model)
    }

    /// Rebuilds the classifier head if the checkpoint has one.
    pub fn head(&self, dtype: DType) -> Result<Option<PoolerParams>> {
        let Some(pc) = &self.pooler_config else {
            return Ok(None);
        };
        let head = PoolerParams::new(pc, RngSeed(0), dtype)?;
        let mut params = Vec::new();
        head.collect_params("head", &mut params);
        self.assign(&params)?;
        Ok(Some(head))
    }

    /// Loads stored moments for the given parameter names into `opt`.
    pub fn restore_optimizer(&self, opt: &mut AdamW, names: &[String], dtype: DType) -> Result<()> {
        let table = self.lookup();
        for name in names {
            let m = table.get(format!("{}{name}", MOMENT_PREFIX[0]).as_str()).copied();
            let v = table.get(format!("{}{name}", MOMENT_PREFIX[1]).as_str()).copied();
            if let (Some(m), Some(v)) = (m, v) {
                opt.set_moments(name, m.to_tensor(dtype)?, v.to_tensor(dtype)?);
            }
        }
        opt.t = self.train_state.map_or(0, |s| s.step as u64);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::ShapeMismatch(format!("tensor {} data does not fill {:?}", t.name, t.shape)));
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset: payload.len() as u64,
            });
            for x in &t.data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&CheckpointHeader {
            model_config: self.model_config.clone(),
            pooler_config: self.pooler_config.clone(),
            train_state: self.train_state,
            run: self.run.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(payload.len() + header.len() + 28);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = r.u64()?;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::CorruptManifest(format!("checkpoint header: {e}")))?;
        let payload_len = r.u64()?;
        let payload = r.take(payload_len)?;
        let stored = r.u32()?;
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::CrcMismatch { stored, computed });
        }
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let end = e.offset + 4 * n as u64;
                if end > payload.len() as u64 {
                    return Err(Error::OffsetOutOfRange {
                        offset: e.offset,
                        end,
                        len: payload.len() as u64,
                    });
                }
                let data = payload[e.offset as usize..end as usize]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                Ok(NamedTensor {
                    name: e.name,
                    shape: e.shape,
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model_config: header.model_config,
            pooler_config: header.pooler_config,
            train_state: header.train_state,
            run: header.run,
            tensors,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64) -> Result<&'a [u8]> {
        let end = (self.pos as u64).saturating_add(n);
        if end > self.bytes.len() as u64 {
            return Err(Error::OffsetOutOfRange {
                offset: self.pos as u64,
                end,
                len: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end as usize];
        self.pos = end as usize;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, &ck.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?)
}

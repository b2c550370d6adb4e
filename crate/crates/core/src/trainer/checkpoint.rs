//! Little-endian binary checkpoints.
//!
//! Layout: `"VFTC"`, version `u32`, dtype tag `u8`, a JSON blob (`u32`
//! length + bytes) holding the configuration, encoder geometry, epoch,
//! RNG seed and loss history, the Adam step `u64`, the tensor count `u32`,
//! then per tensor: name (`u32` length + UTF-8), rank `u32`, dims `u32` each,
//! values, first moments, second moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

use super::optim::Adam;
use super::{EpochLog, Model, TrainConfig};

const MAGIC: &[u8; 4] = b"VFTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub encoder: EncoderConfig,
    pub train_classes: usize,
    /// Completed epochs.
    pub epoch: usize,
    /// Seed from which every per-epoch stream is derived.
    pub rng_seed: u64,
    pub history: Vec<EpochLog>,
}

/// Full training state.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor<T>)>,
    pub adam_step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: "truncated file".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let size = T::DTYPE.size();
        Ok(self.take(n * size)?.chunks_exact(size).map(T::read_le).collect())
    }
}

/// Element type recorded in a checkpoint header.
pub fn stored_dtype(path: &Path) -> Result<DType> {
    use std::io::Read;
    let mut head = [0u8; 9];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map_err(|e| Error::io(path, e))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format {
            what: "checkpoint",
            detail: "missing VFTC magic".into(),
        });
    }
    DType::from_tag(head[8]).ok_or_else(|| Error::Version(format!("unknown dtype tag {}", head[8])))
}

impl<T: Real> Checkpoint<T> {
    pub fn capture(model: &Model<T>, adam: &Adam<T>, meta: CheckpointMeta) -> Self {
        let params = model
            .store
            .ids()
            .map(|id| (model.store.name(id).to_string(), model.store.peek(id).clone()))
            .collect();
        Self {
            meta,
            params,
            adam_step: adam.step,
            m: adam.m.clone(),
            v: adam.v.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (k, (name, t)) in self.params.iter().enumerate() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for src in [t.data(), &self.m[k], &self.v[k]] {
                for &x in src {
                    x.write_le(&mut out);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                what: "checkpoint",
                detail: "missing VFTC magic".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let tag = r.take(1)?[0];
        if tag != T::DTYPE.tag() {
            return Err(Error::Version(format!(
                "checkpoint stores dtype tag {tag}, expected {}",
                T::DTYPE
            )));
        }
        let len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)?;
        let adam_step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format {
                what: "checkpoint",
                detail: "parameter name is not UTF-8".into(),
            })?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            params.push((name, Tensor::new(shape, r.values(n)?)?));
            m.push(r.values(n)?);
            v.push(r.values(n)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: "trailing bytes".into(),
            });
        }
        Ok(Self {
            meta,
            params,
            adam_step,
            m,
            v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and optimizer; names and shapes must match the
    /// architecture implied by the stored configuration.
    pub fn restore(&self) -> Result<(Model<T>, Adam<T>)> {
        let enc = &self.meta.encoder;
        if self.meta.config.encoder(enc.image_h, enc.image_w, enc.vocab_size) != *enc {
            return Err(Error::Version(
                "configuration does not match the stored encoder geometry".into(),
            ));
        }
        let mut model = Model::new(&self.meta.config, enc.clone(), self.meta.train_classes)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Version(format!(
                "checkpoint holds {} tensors, configuration builds {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Version(format!("unknown parameter `{name}` in checkpoint")))?;
            if model.store.peek(id).shape() != t.shape() {
                return Err(Error::Version(format!("shape mismatch for `{name}`")));
            }
            *model.store.get_mut(id) = t.clone().with_grad();
        }
        // Moments are stored in checkpoint order; reorder to store order.
        let order: Vec<usize> = model
            .store
            .ids()
            .map(|id| {
                let name = model.store.name(id);
                self.params.iter().position(|(n, _)| n == name).unwrap()
            })
            .collect();
        let m = order.iter().map(|&k| self.m[k].clone()).collect();
        let v = order.iter().map(|&k| self.v[k].clone()).collect();
        let adam = Adam::with_state(&model.store, self.meta.config.lr, self.adam_step, m, v)?;
        Ok((model, adam))
    }
}

//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "TEVO"  u32 version  u32 config-hash  u32 tensor-count
//! per tensor: u16 name-len, name, u8 rank, u32 extents…, f32 values…
//! trailer:    u64 step, u32 json-len, model config as JSON
//! ```
//!
//! Tensors appear in registry order, then frozen factors, then the Adam
//! moments as `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{FrozenStore, Model, ModelConfig};
use crate::tensor::{Real, Tensor};

use super::adam::{Adam, AdamConfig};

pub const MAGIC: &[u8; 4] = b"TEVO";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn capture<R: Real>(model: &Model<R>, adam: Option<&Adam<R>>, step: u64) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = model
            .registry()
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.cast()))
            .collect();
        tensors.extend(model.frozen().iter().map(|(n, t)| (n.to_string(), t.cast())));
        if let Some(adam) = adam {
            for (kind, moments) in [("m", &adam.first), ("v", &adam.second)] {
                for ((_, name, t), buf) in model.registry().iter().zip(moments) {
                    let values = buf.iter().map(|x| x.as_f64() as f32).collect();
                    let tensor = Tensor::new(t.shape(), values).expect("moment matches its parameter");
                    tensors.push((format!("adam.{kind}/{name}"), tensor));
                }
            }
        }
        Self {
            config: model.config().clone(),
            step,
            tensors,
        }
    }

    fn find(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))
    }

    /// Rebuilds the model with every stored value.
    pub fn restore<R: Real>(&self) -> Result<Model<R>> {
        let mut model = Model::<R>::build(&self.config)?;
        for id in model.registry().ids().collect::<Vec<_>>() {
            let name = model.registry().name(id).to_string();
            let stored = self.find(&name)?;
            let dst = model.registry_mut().get_mut(id);
            if stored.shape() != dst.shape() {
                return Err(Error::CorruptCheckpoint(format!("tensor {name} has shape {:?}", stored.shape())));
            }
            for (d, s) in dst.data_mut().iter_mut().zip(stored.data()) {
                *d = R::from_f64(*s as f64);
            }
        }
        let mut frozen = FrozenStore::new();
        for (name, _) in model.frozen().iter() {
            frozen.insert(name, self.find(name)?.cast())?;
        }
        model.set_frozen(frozen)?;
        Ok(model)
    }

    /// Optimizer state, if the checkpoint carries moments.
    pub fn restore_adam<R: Real>(&self, model: &Model<R>, config: AdamConfig) -> Result<Option<Adam<R>>> {
        if !self.tensors.iter().any(|(n, _)| n.starts_with("adam.")) {
            return Ok(None);
        }
        let mut adam = Adam::new(model.registry(), config);
        for (kind, moments) in [("m", &mut adam.first), ("v", &mut adam.second)] {
            for ((_, name, _), buf) in model.registry().iter().zip(moments.iter_mut()) {
                let t = self.find(&format!("adam.{kind}/{name}"))?;
                if t.numel() != buf.len() {
                    return Err(Error::CorruptCheckpoint(format!("moment for {name} has the wrong size")));
                }
                *buf = t.data().iter().map(|&x| R::from_f64(x as f64)).collect();
            }
        }
        adam.step = self.step;
        Ok(Some(adam))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.hash().to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| Error::Input(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(bytes);
            out.push(u8::try_from(t.rank()).map_err(|_| Error::Input(format!("rank of {name}")))?);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        let json = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    /// Parses a checkpoint; `expected_hash` additionally pins the config.
    pub fn from_bytes(bytes: &[u8], expected_hash: Option<u32>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let hash = r.u32()?;
        if let Some(expected) = expected_hash {
            if hash != expected {
                return Err(Error::ConfigHash { found: hash, expected });
            }
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("tensor too large".into()))?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(&shape, values).map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        let step = r.u64()?;
        let json_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if config.hash() != hash {
            return Err(Error::CorruptCheckpoint("stored config does not match its hash".into()));
        }
        Ok(Self { config, step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_hash: Option<u32>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, expected_hash)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated at byte {} of {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

//! Binary checkpoint container.
//!
//! ```text
//! "DDLM" | u32 version | u64 json_len | json | u32 n_tensors
//! n_tensors * ( u32 name_len | name | u32 rank | rank * u64 extent
//!               | u8 dtype | u64 byte_len | raw little-endian values )
//! u64 FNV-1a of every preceding byte
//! ```
//! All integers are little-endian. The JSON blob is kept verbatim so that a
//! loaded checkpoint re-saves to identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{fnv1a, RunConfig};
use crate::error::{Error, Result};
use crate::model::{param_layout, ModelParams, Transformer};
use crate::numerics::{DType, Real, Tensor, RNG_ALGORITHM};

pub const MAGIC: &[u8; 4] = b"DDLM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub run: RunConfig,
    pub config_hash: String,
    pub rng_algorithm: String,
    /// Training step at which the weights were captured.
    pub step: u64,
}

impl CheckpointMeta {
    pub fn new(run: RunConfig, step: u64) -> Self {
        Self {
            config_hash: run.hash(),
            run,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            step,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real = f32> {
    pub meta: CheckpointMeta,
    meta_json: String,
    pub params: ModelParams<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(meta: CheckpointMeta, params: ModelParams<T>) -> Result<Self> {
        let meta_json = serde_json::to_string(&meta)?;
        Ok(Self {
            meta,
            meta_json,
            params,
        })
    }

    pub fn model(&self) -> Transformer<T> {
        Transformer {
            config: self.meta.run.model.clone(),
            params: self.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.meta_json.as_bytes());
        let named = self.params.named();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.push(T::DTYPE.code());
            out.extend_from_slice(&((t.numel() * T::DTYPE.size()) as u64).to_le_bytes());
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Load(format!(
                "checkpoint format version {version} is not supported (this build reads {FORMAT_VERSION})"
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a(body) != stored {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let json_len = r.u64()? as usize;
        let meta_json = std::str::from_utf8(r.take(json_len)?)
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?
            .to_string();
        let meta: CheckpointMeta = serde_json::from_str(&meta_json)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        if meta.run.hash() != meta.config_hash {
            return Err(Error::Load(format!(
                "checkpoint config hash {} does not match its config ({})",
                meta.config_hash,
                meta.run.hash()
            )));
        }
        let layout = param_layout(&meta.run.model);
        let n = r.u32()? as usize;
        if n != layout.len() {
            return Err(Error::Load(format!(
                "checkpoint holds {n} tensors, model config needs {}",
                layout.len()
            )));
        }
        let mut tensors = Vec::with_capacity(n);
        for (want_name, want_shape) in &layout {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            if name != want_name || &shape != want_shape {
                return Err(Error::Load(format!(
                    "tensor `{name}` {shape:?} does not match expected `{want_name}` {want_shape:?}"
                )));
            }
            let dtype = DType::from_code(r.u8()?)
                .ok_or_else(|| Error::Format(format!("tensor `{name}`: unknown dtype")))?;
            if dtype != T::DTYPE {
                return Err(Error::Load(format!(
                    "tensor `{name}` stored as {dtype:?}, requested {:?}",
                    T::DTYPE
                )));
            }
            let byte_len = r.u64()? as usize;
            let numel: usize = shape.iter().product();
            if byte_len != numel * dtype.size() {
                return Err(Error::Format(format!(
                    "tensor `{name}`: byte length {byte_len} disagrees with shape"
                )));
            }
            let raw = r.take(byte_len)?;
            let data: Vec<T> = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
            tensors.push(Tensor::parameter(data, &shape)?);
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes before checksum".into()));
        }
        let params = ModelParams::from_tensors(&meta.run.model, tensors)?;
        Ok(Self {
            meta,
            meta_json,
            params,
        })
    }

    /// Write atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Load(m) => Error::Load(format!("{}: {m}", path.display())),
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
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

//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `MVPC` · u32 version · u32 len + config text · u64 step · u64 rng state ·
//! u32 tensor count · per tensor (u32 len + name, u32 len + dtype, u32 rank, u64 dims…) ·
//! every tensor's values as f64 in manifest order · u32 CRC-32 of everything before it.

use std::fs;
use std::path::Path;

use crate::data::parse_key_values;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MvpModel};
use crate::numerics::Tensor;
use crate::params::ModelParams;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"MVPC";
pub const VERSION: u32 = 1;

/// Largest tensor rank and element count accepted when reading.
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    /// Optimizer steps taken before saving.
    pub step: u64,
    pub rng_state: u64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text: String = self
            .config
            .to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_str(&mut out, &text);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_state.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            put_str(&mut out, T::dtype_name());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
        }
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::IncompatibleCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "format version {version}, this build reads {VERSION}"
            )));
        }
        if r.remaining() < 4 {
            return Err(Error::Integrity("truncated checkpoint: missing checksum".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Integrity(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        r.bytes = body;
        let text = r.string()?;
        let mut config = ModelConfig::default();
        for (k, v) in parse_key_values(&text, |line, message| {
            Error::Integrity(format!("config line {line}: {message}"))
        })? {
            if !config.set(&k, &v)? {
                return Err(Error::Integrity(format!("unknown config key {k:?}")));
            }
        }
        let step = r.u64()?;
        let rng_state = r.u64()?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.string()?;
            if dtype != "f64" && dtype != "f32" {
                return Err(Error::IncompatibleCheckpoint(format!("tensor {name}: dtype {dtype:?}")));
            }
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(Error::Integrity(format!("tensor {name}: rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&len| len <= r.remaining() / 8)
                .ok_or_else(|| Error::Integrity(format!("tensor {name}: payload exceeds file size")))?;
            manifest.push((name, shape, len));
        }
        let mut params = ModelParams::new();
        for (name, shape, len) in manifest {
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integrity(format!("tensor {name}: non-finite value")));
            }
            let data = data.into_iter().map(T::of).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Integrity(format!("tensor {name}: {e}")))?;
            params
                .insert(name.clone(), t)
                .map_err(|e| Error::Integrity(format!("tensor {name}: {e}")))?;
        }
        if r.remaining() != 0 {
            return Err(Error::Integrity(format!("{} trailing bytes", r.remaining())));
        }
        config.check_params(&params)?;
        Ok(Self {
            config,
            params,
            step,
            rng_state,
        })
    }

    /// Model under `expected` (or the stored config); shapes must agree with it.
    pub fn into_model(self, expected: Option<&ModelConfig>) -> Result<MvpModel<T>> {
        let config = expected.copied().unwrap_or(self.config);
        config.check_params(&self.params)?;
        MvpModel::new(config, self.params)
    }
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, checkpoint: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Integrity(format!(
                "truncated checkpoint: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Integrity(format!("invalid UTF-8 at offset {}", self.pos)))
    }
}

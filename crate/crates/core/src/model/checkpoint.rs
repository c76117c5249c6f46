//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MSAD"                 4-byte magic
//! version: u32           currently 1
//! config_len: u32        followed by the model configuration as UTF-8 JSON
//! record_count: u32
//! record_count × {
//!     role: u8           0 = trainable parameter, 1 = running statistic
//!     name_len: u32, name bytes (UTF-8)
//!     ndim: u32, ndim × u64 extents
//!     precision: u8      4 = f32, 8 = f64
//!     raw little-endian values, product(extents) of them
//! }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Precision, Tensor};

use super::config::ModelConfig;
use super::graph::{build_msadnet, ModelGraph, NamedTensor};

pub const MAGIC: &[u8; 4] = b"MSAD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordRole {
    Parameter,
    RunningStat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub role: RecordRole,
    pub name: String,
    pub shape: Vec<usize>,
    pub precision: Precision,
    pub raw: Vec<u8>,
}

/// Decoded checkpoint, independent of the element type.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn from_model<T: Element>(model: &ModelGraph<T>) -> Result<Self> {
        let mut config = model.config().clone();
        config.precision = T::PRECISION;
        let encode = |role, nt: &NamedTensor<T>| {
            let mut raw = Vec::with_capacity(nt.tensor.numel() * T::PRECISION.byte_width());
            for &v in nt.tensor.data() {
                v.write_le(&mut raw);
            }
            Record {
                role,
                name: nt.name.clone(),
                shape: nt.tensor.shape().to_vec(),
                precision: T::PRECISION,
                raw,
            }
        };
        let records = model
            .params()
            .iter()
            .map(|p| encode(RecordRole::Parameter, p))
            .chain(model.buffers().iter().map(|b| encode(RecordRole::RunningStat, b)))
            .collect();
        Ok(Self { config, records })
    }

    pub fn precision(&self) -> Precision {
        self.config.precision
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.push(match r.role {
                RecordRole::Parameter => 0,
                RecordRole::RunningStat => 1,
            });
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(r.precision.byte_width() as u8);
            out.extend_from_slice(&r.raw);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(4)? != MAGIC {
            return Err(Error::Checkpoint("missing MSAD magic bytes".into()));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let cfg_len = rd.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(rd.take(cfg_len)?)
            .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        let count = rd.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let role = match rd.u8()? {
                0 => RecordRole::Parameter,
                1 => RecordRole::RunningStat,
                other => return Err(Error::Checkpoint(format!("unknown record role {other}"))),
            };
            let name_len = rd.u32()? as usize;
            let name = String::from_utf8(rd.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let ndim = rd.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(rd.u64()? as usize);
            }
            let precision = match rd.u8()? {
                4 => Precision::Single,
                8 => Precision::Double,
                other => return Err(Error::Checkpoint(format!("unknown precision width {other}"))),
            };
            let numel: usize = shape.iter().product();
            let raw = rd.take(numel * precision.byte_width())?.to_vec();
            records.push(Record {
                role,
                name,
                shape,
                precision,
                raw,
            });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last record",
                bytes.len() - rd.pos
            )));
        }
        Ok(Self { config, records })
    }

    /// Rebuilds the model and loads every record into it.
    pub fn into_model<T: Element>(self) -> Result<ModelGraph<T>> {
        let mut model = build_msadnet::<T>(&self.config)?;
        let n_params = model.params().len();
        let n_buffers = model.buffers().len();
        let (params, buffers): (Vec<_>, Vec<_>) = self
            .records
            .into_iter()
            .partition(|r| r.role == RecordRole::Parameter);
        if params.len() != n_params || buffers.len() != n_buffers {
            return Err(Error::Checkpoint(format!(
                "expected {n_params} parameters and {n_buffers} statistics, found {} and {}",
                params.len(),
                buffers.len()
            )));
        }
        let fill = |dst: &mut NamedTensor<T>, r: Record| -> Result<()> {
            if r.name != dst.name || r.shape != dst.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "record `{}` {:?} does not match model tensor `{}` {:?}",
                    r.name,
                    r.shape,
                    dst.name,
                    dst.tensor.shape()
                )));
            }
            if r.precision != T::PRECISION {
                return Err(Error::Checkpoint(format!(
                    "record `{}` is {:?} precision, expected {:?}",
                    r.name,
                    r.precision,
                    T::PRECISION
                )));
            }
            let w = r.precision.byte_width();
            let values = r.raw.chunks_exact(w).map(T::read_le).collect();
            dst.tensor = Tensor::from_vec(&r.shape, values)?;
            Ok(())
        };
        for (dst, r) in model.params_mut().iter_mut().zip(params) {
            fill(dst, r)?;
        }
        for (dst, r) in model.buffers_mut().iter_mut().zip(buffers) {
            fill(dst, r)?;
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated at byte {}: needed {n} more bytes",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
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

pub fn save_checkpoint<T: Element>(model: &ModelGraph<T>, path: &Path) -> Result<()> {
    let bytes = Checkpoint::from_model(model)?.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<ModelGraph<T>> {
    read_checkpoint(path)?.into_model()
}

//! `GCN1` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GCN1" | u32 version | u64 json_len | json metadata
//! u32 record_count
//! per record: u32 name_len | name (utf-8) | u8 dtype | u32 rank | u64 extent * rank | payload
//! ```
//!
//! dtype tags: 0 = f32, 1 = f64.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{GcnError, Result};
use crate::tensor::{check_shape, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"GCN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }
}

/// Conversion between a concrete scalar tensor and [`AnyTensor`].
pub trait Storable: Scalar {
    fn wrap(t: Tensor<Self>) -> AnyTensor;
    fn unwrap(t: AnyTensor) -> Option<Tensor<Self>>;
}

impl Storable for f32 {
    fn wrap(t: Tensor<f32>) -> AnyTensor {
        AnyTensor::F32(t)
    }

    fn unwrap(t: AnyTensor) -> Option<Tensor<f32>> {
        match t {
            AnyTensor::F32(t) => Some(t),
            AnyTensor::F64(_) => None,
        }
    }
}

impl Storable for f64 {
    fn wrap(t: Tensor<f64>) -> AnyTensor {
        AnyTensor::F64(t)
    }

    fn unwrap(t: AnyTensor) -> Option<Tensor<f64>> {
        match t {
            AnyTensor::F64(t) => Some(t),
            AnyTensor::F32(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub records: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Checkpoint {
            meta,
            records: Vec::new(),
        }
    }

    pub fn push<T: Storable>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.records.push((name.into(), T::wrap(t.clone())));
    }

    /// Remove and return the record called `name`, typed as `T`.
    pub fn take<T: Storable>(&mut self, name: &str) -> Result<Tensor<T>> {
        let pos = self
            .records
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| GcnError::Schema(format!("checkpoint has no tensor {name:?}")))?;
        let (_, t) = self.records.remove(pos);
        let dtype = t.dtype();
        T::unwrap(t).ok_or_else(|| {
            GcnError::Schema(format!(
                "tensor {name:?} stored as {dtype:?}, expected {:?}",
                T::DTYPE
            ))
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().tag());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match t {
                AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(GcnError::format(0, "bad magic, expected \"GCN1\""));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(GcnError::format(4, format!("unsupported version {version}")));
        }
        let json_len = r.u64()? as usize;
        let json_at = r.pos;
        let meta: Value = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| GcnError::format(json_at as u64, format!("metadata: {e}")))?;
        let count = r.u32()?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name_at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| GcnError::format(name_at as u64, "tensor name is not utf-8"))?;
            let tag_at = r.pos;
            let dtype = DType::from_tag(r.u8()?)
                .ok_or_else(|| GcnError::format(tag_at as u64, "unknown dtype tag"))?;
            let rank = r.u32()? as usize;
            let shape_at = r.pos;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = check_shape(&shape)
                .map_err(|e| GcnError::format(shape_at as u64, e.to_string()))?;
            let payload = r.take(n * dtype.size())?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(decode(shape, payload)),
                DType::F64 => AnyTensor::F64(decode(shape, payload)),
            };
            records.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(GcnError::format(r.pos as u64, "trailing bytes after last record"));
        }
        Ok(Checkpoint { meta, records })
    }

    /// Write atomically: the previous file stays intact until the rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let bytes = self.to_bytes()?;
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| GcnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| GcnError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn decode<T: Scalar>(shape: Vec<usize>, payload: &[u8]) -> Tensor<T> {
    let size = T::DTYPE.size();
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_parts(shape, data)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                GcnError::format(
                    self.pos as u64,
                    format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

//! Versioned little-endian binary container shared by checkpoints and
//! dataset splits.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes  "FPNPROTO"
//! version      u32
//! config hash  32 bytes (SHA-256)
//! metadata     u64 length + UTF-8 JSON
//! tensor count u32
//! directory    per tensor: u16 name length, name, u8 dtype, u8 ndim,
//!              u64 dims, u64 payload offset, u64 payload length
//! payload      concatenated tensor bytes
//! ```

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"FPNPROTO";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl StoredData {
    fn tag(&self) -> u8 {
        match self {
            StoredData::F64(_) => 0,
            StoredData::F32(_) => 1,
            StoredData::U8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            StoredData::F64(v) => v.len(),
            StoredData::F32(v) => v.len(),
            StoredData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            StoredData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            StoredData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            StoredData::U8(v) => v.clone(),
        }
    }

    fn from_bytes(tag: u8, bytes: &[u8]) -> Result<Self> {
        Ok(match tag {
            0 => StoredData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => StoredData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => StoredData::U8(bytes.to_vec()),
            t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
        })
    }

    fn elem_size(tag: u8) -> usize {
        match tag {
            0 => 8,
            1 => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: StoredData,
}

impl StoredTensor {
    pub fn new(shape: Vec<usize>, data: StoredData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "stored tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config_hash: [u8; 32],
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, StoredTensor>,
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
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format("length overflows usize".into()))
    }
}

impl Container {
    pub fn new(config_hash: [u8; 32], metadata: serde_json::Value) -> Self {
        Self {
            config_hash,
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: StoredTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&StoredTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            let ndim = u8::try_from(t.shape.len())
                .map_err(|_| Error::Format(format!("tensor {name} has too many dims")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.data.tag());
            out.push(ndim);
            for &dim in &t.shape {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            let bytes = t.data.to_bytes();
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            payload.extend_from_slice(&bytes);
        }
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a model or dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let meta_len = r.u64()?;
        let metadata = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut dir = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let tag = r.u8()?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            let len = r.u64()?;
            dir.push((name, tag, shape, offset, len));
        }
        let payload = &buf[r.pos..];
        let mut tensors = BTreeMap::new();
        for (name, tag, shape, offset, len) in dir {
            let bytes = offset
                .checked_add(len)
                .and_then(|end| payload.get(offset..end))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` exceeds payload")))?;
            if len % StoredData::elem_size(tag) != 0 {
                return Err(Error::Format(format!("tensor `{name}` has a partial element")));
            }
            let data = StoredData::from_bytes(tag, bytes)?;
            tensors.insert(name, StoredTensor::new(shape, data)?);
        }
        Ok(Self {
            config_hash,
            metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new([7; 32], serde_json::json!({"stage": "a"}));
        c.insert(
            "w",
            StoredTensor::new(vec![2, 2], StoredData::F64(vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]))
                .unwrap(),
        );
        c.insert("img", StoredTensor::new(vec![3], StoredData::U8(vec![0, 128, 255])).unwrap());
        c.insert("s", StoredTensor::new(vec![1], StoredData::F32(vec![0.25])).unwrap());
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(matches!(Container::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
    }
}

//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `ERF1`, u32 version, u32 config length, config text (UTF-8), then records
//! until end of file. A record is u32 name length, name bytes, u8 dtype tag
//! (0 = f32, 1 = f64), u32 rank, rank × u64 dims, raw values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ERF1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian values.
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub records: Vec<Record>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Checkpoint {
            config: config.into(),
            records: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        self.records.push(Record {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        });
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Decodes a record; the stored dtype must match `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let r = self
            .record(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks record `{name}`")))?;
        if r.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "record `{name}` is {:?}, requested {:?}",
                r.dtype,
                T::DTYPE
            )));
        }
        let data = r.bytes.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Tensor::new(&r.shape, data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dtype as u8);
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&r.bytes);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not an ERF1 checkpoint".into()));
        }
        let version = rd.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = rd.u32("config length")? as usize;
        let config = String::from_utf8(rd.take(n, "config")?.to_vec())
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let mut records = Vec::new();
        while rd.pos < bytes.len() {
            let n = rd.u32("name length")? as usize;
            let name = String::from_utf8(rd.take(n, "name")?.to_vec())
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let tag = rd.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("record `{name}`: dtype tag {tag}")))?;
            let rank = rd.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| rd.u64("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|c| c.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Format(format!("record `{name}`: size overflow")))?;
            let data = rd.take(count, &format!("values of `{name}`"))?.to_vec();
            records.push(Record {
                name,
                dtype,
                shape,
                bytes: data,
            });
        }
        Ok(Checkpoint { config, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Checkpoint::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

//! Named parameter storage and the binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"HCKP"
//! version u32 = 1
//! count   u64                      number of entries
//! entry*  name_len u64, name bytes (UTF-8),
//!         rank u64, extents u64 × rank,
//!         values f32 × product(extents), row-major
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HCKP";
const VERSION: u32 = 1;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a == b)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, slot: usize) -> &Arc<Tensor> {
        &self.values[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.values.iter().map(|v| v.as_ref())
    }

    /// Mutable access; clones a tensor only if a graph still shares it.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.values.iter_mut().map(Arc::make_mut).collect()
    }

    pub fn set(&mut self, slot: usize, value: Tensor) -> Result<()> {
        if value.shape() != self.values[slot].shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[slot],
                self.values[slot].shape(),
                value.shape()
            )));
        }
        self.values[slot] = Arc::new(value);
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Rounds every value through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (name, value) in self.names.iter().zip(&self.values) {
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(value.shape().len() as u64).to_le_bytes());
            for &d in value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in value.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", path, "bad magic"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(
                "checkpoint",
                path,
                format!("unsupported version {version}"),
            ));
        }
        let count = r.u64()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("checkpoint", path, "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u64()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::format("checkpoint", path, format!("entry {name}: {e}")))?;
            store
                .insert(name, tensor)
                .map_err(|e| Error::format("checkpoint", path, e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", path, "trailing bytes"));
        }
        Ok(store)
    }

    /// Arithmetic mean of each parameter across `stores`.
    pub fn average(stores: &[ParamStore]) -> Result<ParamStore> {
        let first = stores
            .first()
            .ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
        for (i, s) in stores.iter().enumerate().skip(1) {
            if s.names != first.names {
                let offender = s
                    .names
                    .iter()
                    .zip(&first.names)
                    .find(|(a, b)| a != b)
                    .map(|(a, _)| a.clone())
                    .unwrap_or_else(|| format!("parameter count {} vs {}", s.len(), first.len()));
                return Err(Error::Checkpoint(format!(
                    "checkpoint {i} differs in parameter names: {offender}"
                )));
            }
            for (name, (a, b)) in s.names.iter().zip(s.values.iter().zip(&first.values)) {
                if a.shape() != b.shape() {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint {i} parameter {name} has shape {:?}, expected {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
            }
        }
        let n = stores.len() as f64;
        let mut out = first.clone();
        for (slot, t) in out.tensors_mut().into_iter().enumerate() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v = stores.iter().map(|s| s.values[slot].data()[j]).sum::<f64>() / n;
            }
        }
        Ok(out)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", self.path, "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//! `b"BLRCKPT\0"`, `u32` version, `u32` header length, JSON header,
//! `u32` tensor count, then per tensor: `u32` name length, UTF-8 name,
//! `u32` rank, `u64` per dimension, `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BLRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    /// Echo of the training configuration, free-form.
    #[serde(default)]
    pub train: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
    /// Tensors that are not model parameters (e.g. class weights).
    pub extra: Vec<NamedTensor>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(bad("unexpected end of file"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        let params = self.model.layout().tensors.iter().map(|t| NamedTensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data: self.model.params[t.range()].to_vec(),
        });
        let tensors: Vec<NamedTensor> = params.chain(self.extra.iter().cloned()).collect();
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint and checks every parameter tensor against the
    /// layout implied by the stored config.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut r = Reader(&bytes);
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
        let mut model = Model::zeros(header.model.clone())?;
        let count = r.u32()? as usize;
        let mut seen = vec![false; model.layout().tensors.len()];
        let mut extra = Vec::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            match model.layout().tensors.iter().position(|t| t.name == name) {
                Some(i) => {
                    let t = &model.layout().tensors[i];
                    if t.shape != shape {
                        return Err(bad(format!("{name}: shape {shape:?}, config expects {:?}", t.shape)));
                    }
                    let range = t.range();
                    model.params[range].copy_from_slice(&data);
                    seen[i] = true;
                }
                None => extra.push(NamedTensor { name, shape, data }),
            }
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return Err(bad(format!("missing tensor {}", model.layout().tensors[i].name)));
        }
        if !r.0.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { header, model, extra })
    }
}

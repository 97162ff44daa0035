//! The `CATM` checkpoint format.
//!
//! ```text
//! magic  b"CATM"
//! u16    version (1)
//! u32    config length, then the config as UTF-8 JSON
//! tensor block:
//!   u32  tensor count
//!   per tensor: u32 name length, UTF-8 name, u8 rank, u32 x rank dims,
//!               f32 x product(dims)
//! zero or more sections until end of file:
//!   4-byte tag, u64 payload length, payload
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use super::config::NestedVaeConfig;
use super::model::NestedVae;
use crate::backend::Tensor;
use crate::bytes::{put_f32s, Reader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CATM";
pub const CHECKPOINT_VERSION: u16 = 1;

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

/// An extra tagged payload stored after the model tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub tag: [u8; 4],
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NestedVaeConfig,
    pub params: NamedTensors,
    pub sections: Vec<Section>,
}

pub fn encode_tensor_block(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }
    out
}

fn read_tensor_block(r: &mut Reader<'_>) -> Result<NamedTensors> {
    let n = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(n.min(4096));
    for i in 0..n {
        let what = format!("tensor {i}");
        let len = r.u32(&what)? as usize;
        let name = r.utf8(len, &what)?;
        let rank = r.u8(&what)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&what)? as usize);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| Error::Parse(format!("{name}: shape {shape:?} overflows")))?;
        let at = r.pos();
        let data = r.f32s(count, &name)?;
        let t = Tensor::new(&shape, data).map_err(|e| Error::Parse(format!("{name} at byte offset {at}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn decode_tensor_block(bytes: &[u8]) -> Result<NamedTensors> {
    let mut r = Reader::new(bytes);
    let t = read_tensor_block(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::Parse(format!("{} trailing bytes after tensor block", r.remaining())));
    }
    Ok(t)
}

impl Checkpoint {
    pub fn from_model(model: &NestedVae<f32>) -> Self {
        Checkpoint {
            config: model.config.clone(),
            params: model.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            sections: Vec::new(),
        }
    }

    pub fn section(&self, tag: &[u8; 4]) -> Option<&[u8]> {
        self.sections.iter().find(|s| &s.tag == tag).map(|s| s.payload.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend(encode_tensor_block(&self.params));
        for s in &self.sections {
            out.extend_from_slice(&s.tag);
            out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&s.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Parse("bad checkpoint magic at byte offset 0".into()));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version} at byte offset 4")));
        }
        let len = r.u32("config length")? as usize;
        let at = r.pos();
        let cfg = r.take(len, "config")?;
        let config: NestedVaeConfig =
            serde_json::from_slice(cfg).map_err(|e| Error::Parse(format!("config at byte offset {at}: {e}")))?;
        let params = read_tensor_block(&mut r)?;
        let mut sections = Vec::new();
        while r.remaining() > 0 {
            let tag: [u8; 4] = r.take(4, "section tag")?.try_into().expect("4 bytes");
            let n = r.u64("section length")?;
            let n = usize::try_from(n).map_err(|_| Error::Parse(format!("section length {n} too large")))?;
            sections.push(Section {
                tag,
                payload: r.take(n, "section payload")?.to_vec(),
            });
        }
        Ok(Checkpoint {
            config,
            params,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Builds the model described by the config and loads every tensor,
    /// verifying names and shapes.
    pub fn into_model(&self) -> Result<NestedVae<f32>> {
        let mut m = NestedVae::new(self.config.clone(), 0)?;
        m.load_params(&self.params)?;
        Ok(m)
    }
}

impl NestedVae<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_model(self).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::load(path)?.into_model()
    }
}

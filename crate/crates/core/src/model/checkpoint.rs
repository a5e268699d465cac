//! Layout (little-endian):
//!
//! ```text
//! magic "MMGPTCK1"
//! u32 header length, header JSON (sorted keys)
//! u32 entry count, then per entry:
//!   u32 name length, name, u8 trainable flag,
//!   u32 rank, rank × u32 extents, f32 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, Result};
use crate::numerics::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMGPTCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    /// Whether the base network carries adapters.
    pub lora: bool,
    /// True when only adapter and gate entries are stored.
    pub adapters_only: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn is_adapter_entry(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b") || name.contains(".gate_")
}

pub(crate) fn encode(header: &CheckpointHeader, entries: &[CheckpointEntry]) -> Vec<u8> {
    let json = serde_json::to_value(header).expect("serializable header").to_string();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(json.as_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(e.trainable as u8);
        buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &e.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.buf.len() {
            return Err(ModelError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub(crate) fn decode(buf: &[u8]) -> Result<(CheckpointHeader, Vec<CheckpointEntry>)> {
    let mut c = Cursor { buf, at: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let n = c.u32()?;
    let header: CheckpointHeader = serde_json::from_slice(c.take(n)?)
        .map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    let count = c.u32()?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u32()?;
        let name = String::from_utf8(c.take(n)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("entry name is not UTF-8".into()))?;
        let trainable = c.take(1)?[0] != 0;
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let values = c
            .take(len * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.push(CheckpointEntry {
            name,
            trainable,
            shape,
            values,
        });
    }
    if c.at != buf.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok((header, entries))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    Ok(buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(path))?;
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(io_err(path))
}

impl<T: Real> Model<T> {
    fn entries(&self, filter: impl Fn(&str) -> bool) -> Vec<CheckpointEntry> {
        self.store
            .iter()
            .filter(|(_, name, _)| filter(name))
            .map(|(_, name, t)| CheckpointEntry {
                name: name.to_string(),
                trainable: t.requires_grad,
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            config: self.cfg.clone(),
            lora: self.has_lora(),
            adapters_only: false,
        };
        encode(&header, &self.entries(|_| true))
    }

    /// Every parameter with its trainable flag.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    /// Adapter factors and gates only; re-attach with [`Model::load_adapters`].
    pub fn save_adapters(&self, path: &Path) -> Result<()> {
        if !self.has_lora() {
            return Err(ModelError::Checkpoint("model has no adapters to save".into()));
        }
        let header = CheckpointHeader {
            config: self.cfg.clone(),
            lora: true,
            adapters_only: true,
        };
        write_file(path, &encode(&header, &self.entries(is_adapter_entry)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, entries) = decode(bytes)?;
        if header.adapters_only {
            return Err(ModelError::Checkpoint(
                "adapter-only checkpoint needs a base model; use load_adapters".into(),
            ));
        }
        let mut model = Self::new(header.config)?;
        if header.lora {
            model.inject_lora()?;
        }
        if entries.len() != model.store.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} entries for a model with {} parameters",
                entries.len(),
                model.store.len()
            )));
        }
        model.apply(&entries)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Copies adapter and gate values onto this model by name, injecting
    /// adapters first if the model has none.
    pub fn load_adapters(&mut self, path: &Path) -> Result<()> {
        let (header, entries) = decode(&read_file(path)?)?;
        if !header.adapters_only {
            return Err(ModelError::Checkpoint("not an adapter checkpoint".into()));
        }
        let mut base = header.config.clone();
        base.seed = self.cfg.seed;
        if base != self.cfg {
            return Err(ModelError::Checkpoint("adapter config differs from the base model".into()));
        }
        if !self.has_lora() {
            self.inject_lora()?;
        }
        self.apply(&entries)
    }

    fn apply(&mut self, entries: &[CheckpointEntry]) -> Result<()> {
        for e in entries {
            let id = self
                .store
                .id(&e.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter `{}`", e.name)))?;
            let t = self.store.get(id);
            if t.shape() != e.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "`{}`: shape {:?} in file, {:?} in model",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            let mut fresh = Tensor::new(e.shape.clone(), e.values.iter().map(|&v| T::of(v as f64)).collect())?;
            fresh.requires_grad = e.trainable;
            *self.store.get_mut(id) = fresh;
        }
        Ok(())
    }
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(decode(&read_file(path)?)?.0)
}

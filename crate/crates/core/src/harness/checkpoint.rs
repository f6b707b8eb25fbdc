//! Binary checkpoint format.
//!
//! ```text
//! "DEFM"                       magic
//! u32                          format version (1)
//! u32 + bytes                  configuration text (UTF-8)
//! u32                          tensor count
//! per tensor:
//!   u32 + bytes                name (UTF-8)
//!   u32                        rank
//!   u64 * rank                 extents
//!   f64 * product(extents)     values
//! ```
//!
//! All integers and floats are little-endian.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DEFM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &RunConfig) -> Self {
        Checkpoint {
            config: config.to_text(),
            tensors: model
                .store()
                .iter()
                .map(|p| (p.name.clone(), (*p.value).clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {magic:?}"),
            });
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: at as u64,
                reason: format!("unsupported version {version}"),
            });
        }
        let config = r.string("config text")?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            let at = r.pos;
            let mut shape = Vec::with_capacity(rank.min(16));
            let mut numel: usize = 1;
            for _ in 0..rank {
                let e = usize::try_from(r.u64("tensor extent")?)
                    .map_err(|_| r.err(at, "extent overflow"))?;
                numel = numel
                    .checked_mul(e)
                    .ok_or_else(|| r.err(at, "extent product overflow"))?;
                shape.push(e);
            }
            let need = numel
                .checked_mul(8)
                .ok_or_else(|| r.err(at, "tensor too large"))?;
            let raw = r.take(need, "tensor values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| r.err(at, &e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes after last tensor"));
        }
        Ok(Checkpoint { config, tensors })
    }

    /// Atomic write through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_text(&self.config)
    }

    /// Rebuilds the model described by the stored configuration and fills in
    /// the stored values. Names, count and shapes must all match.
    pub fn to_model(&self) -> Result<(Model, RunConfig)> {
        let cfg = self.run_config()?;
        let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
        if model.store().len() != self.tensors.len() {
            return Err(Error::input(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                model.store().len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = model.store().id(name).ok_or_else(|| {
                Error::input(format!("checkpoint tensor {name} has no model parameter"))
            })?;
            model.store_mut().set_value(id, t.clone())?;
        }
        Ok((model, cfg))
    }
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
    fn err(&self, offset: usize, reason: &str) -> Error {
        Error::Format {
            offset: offset as u64,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(
                self.pos,
                &format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err(at, &format!("{what} is not UTF-8")))
    }
}

//! Checkpoint layout, little-endian:
//!
//! ```text
//! "VLMCKPT" | u32 version | u32 json bytes | config JSON | u32 tensors
//! tensors x (u32 name bytes | name | u32 ndim | ndim x u32 | f32 values)
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, ParameterStore};
use crate::error::{Error, Result};

pub const CKPT_MAGIC: &[u8; 7] = b"VLMCKPT";
pub const CKPT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let json = model.config().to_json();
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(json.as_bytes());
    let tensors = model.params().tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt {
                offset: self.buf.len() as u64,
                message: format!("checkpoint truncated (needed {n} bytes at {})", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Load a checkpoint. With `expected`, any config difference is refused.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf, pos: 0 };
    if r.take(7)? != CKPT_MAGIC {
        return Err(Error::Incompatible(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()? as u32;
    if version != CKPT_VERSION {
        return Err(Error::Incompatible(format!("checkpoint version {version}, expected {CKPT_VERSION}")));
    }
    let n = r.u32()?;
    let cfg: ModelConfig = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Incompatible(format!("checkpoint config: {e}")))?;
    if let Some(exp) = expected {
        if exp != &cfg {
            return Err(Error::Incompatible(format!(
                "checkpoint config {} differs from expected {}",
                cfg.to_json(),
                exp.to_json()
            )));
        }
    }
    let count = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let n = r.u32()?;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Corrupt { offset: r.pos as u64, message: "tensor name is not UTF-8".into() })?;
        let ndim = r.u32()?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()?);
        }
        let len: usize = shape.iter().product();
        let data = r
            .take(len * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        store.add(&name, &shape, data)?;
    }
    if r.pos != r.buf.len() {
        return Err(Error::Corrupt { offset: r.pos as u64, message: "trailing bytes after tensors".into() });
    }
    Model::from_params(cfg, store)
}

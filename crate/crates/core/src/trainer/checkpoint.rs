//! Versioned little-endian checkpoint format.
//!
//! ```text
//! magic "ACOTCKPT" | version u32 | config_len u32 | config JSON
//! step u64 | adam_t u64 | count u32
//! count × (name_len u32 | name | group u8 | ndim u32 | dims u32… |
//!          value f64… | ema f64… | m f64… | v f64…)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Group, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"ACOTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
    pub ema: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// JSON echo of the configuration the run was built from.
    pub config: String,
    pub step: u64,
    pub adam_t: u64,
    pub params: Vec<ParamRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize);
        put_u32(&mut out, self.config.len());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        put_u32(&mut out, self.params.len());
        for p in &self.params {
            put_u32(&mut out, p.name.len());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.group.tag());
            put_u32(&mut out, p.value.shape().len());
            for &d in p.value.shape() {
                put_u32(&mut out, d);
            }
            put_f64s(&mut out, p.value.data());
            put_f64s(&mut out, p.ema.data());
            put_f64s(&mut out, &p.m);
            put_f64s(&mut out, &p.v);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = c.u32()? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let n = c.u32()?;
        let config = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("config is not utf-8".into()))?;
        let step = c.u64()?;
        let adam_t = c.u64()?;
        let count = c.u32()?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let n = c.u32()?;
            let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not utf-8".into()))?;
            let tag = c.u8()?;
            let group = Group::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown group tag {tag}")))?;
            let ndim = c.u32()?;
            let shape = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let value = Tensor::new(&shape, c.f64s(numel)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let ema = Tensor::new(&shape, c.f64s(numel)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let m = c.f64s(numel)?;
            let v = c.f64s(numel)?;
            params.push(ParamRecord { name, group, value, ema, m, v });
        }
        if c.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Self { config, step, adam_t, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }

    /// Copies raw or EMA weights into `store`, matching by name and shape.
    pub fn restore_into(&self, store: &mut ParamStore, use_ema: bool) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let id = store
                .find(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{}'", p.name)))?;
            if store.group(id) != p.group || store.get(id).shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("parameter '{}' does not match the model", p.name)));
            }
            store.set(id, if use_ema { p.ema.clone() } else { p.value.clone() })?;
        }
        Ok(())
    }
}

//! Versioned binary checkpoint, all fields little-endian:
//!
//! ```text
//! magic        8 bytes   "CTUQLPN\0"
//! version      u32
//! input_dim    u32
//! n_hidden     u32
//! widths       u32 x n_hidden
//! beta         f64
//! alpha        f64
//! n_params     u64
//! params       f64 x n_params
//! ```

use std::path::Path;

use super::{Architecture, PriorModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTUQLPN\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn model_to_bytes(model: &PriorModel) -> Vec<u8> {
    let arch = model.architecture();
    let mut out = Vec::with_capacity(64 + 8 * model.n_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(arch.hidden.len() as u32).to_le_bytes());
    for &h in &arch.hidden {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    out.extend_from_slice(&arch.beta.to_le_bytes());
    out.extend_from_slice(&arch.alpha.to_le_bytes());
    out.extend_from_slice(&(model.n_params() as u64).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let v = f64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Checkpoint(format!("non-finite value in {what}")))
        }
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<PriorModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a model checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let input_dim = r.u32("input_dim")? as usize;
    let depth = r.u32("layer count")? as usize;
    if depth > 1024 {
        return Err(Error::Checkpoint(format!("implausible layer count {depth}")));
    }
    let hidden = (0..depth).map(|_| r.u32("layer width").map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
    let beta = r.f64("beta")?;
    let alpha = r.f64("alpha")?;
    let arch = Architecture { input_dim, hidden, beta, alpha };
    arch.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let expected = super::Layout::new(&arch).total;
    let n_params = r.u64("parameter count")? as usize;
    if n_params != expected {
        return Err(Error::Checkpoint(format!(
            "parameter count {n_params} does not match architecture ({expected})"
        )));
    }
    let params = (0..n_params).map(|_| r.f64("parameters")).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    PriorModel::from_params(arch, params).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_model(model: &PriorModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PriorModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

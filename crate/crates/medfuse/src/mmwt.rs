//! MMWT1: the checkpoint container.
//!
//! ```text
//! "MMWT1\0"  version:u32  config_hash:u64  config_len:u32 config:UTF-8
//! param_count:u32
//! per parameter (sorted by name):
//!   name_len:u32 name:UTF-8  rows:u32  cols:u32  rows*cols f32
//! ```
//!
//! The embedded config text is the full `key = value` serialization and the
//! hash is FNV-1a 64 over it. Loading recomputes the hash and checks the
//! parameters against the names and shapes the configured model declares.

use medfuse_core::diff::{Tensor, TensorMap};
use medfuse_core::model::Model;
use medfuse_core::train::{Checkpoint, RunConfig};

use crate::config;
use crate::error::FormatError;
use crate::mmeb::{check_preamble, Cursor};

pub const MAGIC: &[u8; 6] = b"MMWT1\0";
pub const VERSION: u32 = 1;

pub fn write_mmwt(ckpt: &Checkpoint) -> Vec<u8> {
    let text = config::to_text(&ckpt.config);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config::hash_text(&text).to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Decoded checkpoint plus the hash stored with it.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCheckpoint {
    pub checkpoint: Checkpoint,
    pub config_hash: u64,
}

impl LoadedCheckpoint {
    /// Resuming needs the resolved configuration to hash to the stored value.
    pub fn check_resume(&self, cfg: &RunConfig) -> Result<(), FormatError> {
        let found = config::config_hash(cfg);
        if found != self.config_hash {
            return Err(FormatError::ConfigHash {
                expected: self.config_hash,
                found,
            });
        }
        Ok(())
    }
}

pub fn read_mmwt(bytes: &[u8]) -> Result<LoadedCheckpoint, FormatError> {
    let mut c = Cursor::new(bytes);
    check_preamble(&mut c, MAGIC, "MMWT1", VERSION)?;
    let stored = u64::from_le_bytes(c.array("config hash")?);
    let len = c.u32("config length")? as usize;
    let text = std::str::from_utf8(c.take(len, "config text")?).map_err(|_| FormatError::InvalidUtf8("config text"))?;
    let found = config::hash_text(text);
    if found != stored {
        return Err(FormatError::ConfigHash { expected: stored, found });
    }
    let cfg = config::from_text(text).map_err(|e| FormatError::BadHeader(format!("embedded config: {}", e)))?;

    let count = c.u32("parameter count")? as usize;
    let mut params = TensorMap::new();
    for _ in 0..count {
        let n = c.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(c.take(n, "parameter name")?)
            .map_err(|_| FormatError::InvalidUtf8("parameter name"))?
            .to_string();
        let rows = c.u32("parameter rows")? as usize;
        let cols = c.u32("parameter cols")? as usize;
        let numel = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| FormatError::ParamMismatch(format!("`{}` shape overflows", name)))?;
        let data = c
            .take(numel, "parameter data")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        if params.insert(name.clone(), Tensor::matrix(rows, cols, data)).is_some() {
            return Err(FormatError::ParamMismatch(format!("`{}` appears twice", name)));
        }
    }
    if c.remaining() > 0 {
        return Err(FormatError::TrailingBytes(c.remaining()));
    }

    let model = Model::new(&cfg).map_err(|e| FormatError::BadHeader(format!("embedded config: {}", e)))?;
    let specs = model.param_specs();
    if specs.len() != params.len() {
        return Err(FormatError::ParamMismatch(format!(
            "model has {} parameters, file has {}",
            specs.len(),
            params.len()
        )));
    }
    for s in &specs {
        match params.get(&s.name) {
            None => return Err(FormatError::ParamMismatch(format!("missing `{}`", s.name))),
            Some(t) if t.dims() != [s.rows, s.cols] => {
                return Err(FormatError::ParamMismatch(format!(
                    "`{}` is {:?}, model expects [{}, {}]",
                    s.name,
                    t.dims(),
                    s.rows,
                    s.cols
                )))
            }
            Some(t) if !t.is_finite() => {
                return Err(FormatError::ParamMismatch(format!("`{}` has non-finite values", s.name)))
            }
            _ => {}
        }
    }
    Ok(LoadedCheckpoint {
        checkpoint: Checkpoint { config: cfg, params },
        config_hash: stored,
    })
}

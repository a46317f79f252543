//! Binary model container.
//!
//! Layout (little-endian): magic `RHTM`, `u16` version, schema name and
//! labels, backend id, training metadata as JSON, then the payload as a
//! `u64` length, the bytes, and their SHA-256 digest. Strings are `u32`
//! length-prefixed UTF-8.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ModelHandle, TrainingMeta};
use crate::corpus::LabelSchema;

pub const MAGIC: &[u8; 4] = b"RHTM";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("bad magic header")]
    BadMagic,
    #[error("version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("truncated model file")]
    Truncated,
    #[error("payload checksum mismatch")]
    ChecksumMismatch,
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn to_bytes(model: &ModelHandle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &model.schema.name);
    out.extend_from_slice(&(model.schema.labels.len() as u16).to_le_bytes());
    for l in &model.schema.labels {
        put_str(&mut out, l);
    }
    put_str(&mut out, &model.backend_id);
    put_str(&mut out, &serde_json::to_string(&model.training_meta).expect("metadata serializes"));
    out.extend_from_slice(&(model.parameters.len() as u64).to_le_bytes());
    out.extend_from_slice(&model.parameters);
    out.extend_from_slice(&Sha256::digest(&model.parameters));
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(ModelFileError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ModelFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ModelFileError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ModelFileError::Corrupt("string is not UTF-8".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelHandle, ModelFileError> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(ModelFileError::BadMagic);
    }
    let mut c = Cursor { buf: bytes, pos: 4 };
    let version = c.u16()?;
    if version != VERSION {
        return Err(ModelFileError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let name = c.string()?;
    let n_labels = c.u16()? as usize;
    let labels = (0..n_labels).map(|_| c.string()).collect::<Result<Vec<_>, _>>()?;
    let schema = LabelSchema::new(name, labels).map_err(|e| ModelFileError::Corrupt(e.to_string()))?;
    let backend_id = c.string()?;
    let meta: TrainingMeta =
        serde_json::from_str(&c.string()?).map_err(|e| ModelFileError::Corrupt(format!("metadata: {e}")))?;
    let len = usize::try_from(c.u64()?).map_err(|_| ModelFileError::Truncated)?;
    let parameters = c.take(len)?.to_vec();
    let digest = c.take(32)?;
    if digest != Sha256::digest(&parameters).as_slice() {
        return Err(ModelFileError::ChecksumMismatch);
    }
    if c.pos != bytes.len() {
        return Err(ModelFileError::Corrupt("trailing bytes".into()));
    }
    Ok(ModelHandle {
        backend_id,
        schema,
        parameters,
        training_meta: meta,
    })
}

pub fn save_model(model: &ModelHandle, path: impl AsRef<Path>) -> Result<(), ModelFileError> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelHandle, ModelFileError> {
    from_bytes(&std::fs::read(path)?)
}

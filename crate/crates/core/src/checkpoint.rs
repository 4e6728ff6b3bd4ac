//! Binary weight checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"WSCK" | u32 version (=1) | u32 id_len | id_len bytes of UTF-8 model id
//!         | u64 p | p x f64
//! ```

use std::fs;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::models::WeightVector;

const MAGIC: &[u8; 4] = b"WSCK";
const VERSION: u32 = 1;

pub fn encode(w: &WeightVector) -> Vec<u8> {
    let id = w.model_id.as_bytes();
    let mut out = Vec::with_capacity(20 + id.len() + 8 * w.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&(w.len() as u64).to_le_bytes());
    for v in w.values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<WeightVector> {
    let mut cursor = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let (head, tail) = cursor.split_at(n);
        cursor = tail;
        Ok(head)
    };
    if take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let id_len = u32::from_le_bytes(take(4, "id length")?.try_into().expect("4 bytes")) as usize;
    let model_id = std::str::from_utf8(take(id_len, "model id")?)
        .map_err(|_| Error::Checkpoint("model id is not UTF-8".into()))?
        .to_owned();
    let p = u64::from_le_bytes(take(8, "parameter count")?.try_into().expect("8 bytes")) as usize;
    let body = take(
        p.checked_mul(8)
            .ok_or_else(|| Error::Checkpoint("parameter count overflow".into()))?,
        "weights",
    )?;
    if !cursor.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", cursor.len())));
    }
    let values = DVector::from_iterator(p, body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))));
    Ok(WeightVector { values, model_id })
}

pub fn save(w: &WeightVector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(w)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<WeightVector> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

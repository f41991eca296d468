//! Binary parameter checkpoints.
//!
//! Layout: the magic bytes `MSVIT1\n`, then one record per parameter or
//! buffer in name order:
//!
//! ```text
//! u32 LE   name length in bytes
//! [u8]     UTF-8 name
//! u32 LE   number of dimensions
//! u64 LE   each dimension
//! f64 LE   each value, row-major
//! ```

use std::path::Path;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8] = b"MSVIT1\n";

pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for id in store.sorted_ids() {
        let p = store.get(id);
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses every record into `(name, tensor)` pairs in file order.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(Error::Checkpoint("missing MSVIT1 magic".into()));
    }
    let mut r = Reader { bytes, pos: CHECKPOINT_MAGIC.len() };
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("oversized tensor".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::real(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        records.push((name, tensor));
    }
    Ok(records)
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

/// Loads values into an existing store. Names and shapes must match exactly.
pub fn load_checkpoint<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = decode_checkpoint::<T>(&bytes)?;
    if records.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            records.len(),
            store.len()
        )));
    }
    let mut loaded = ParamStore::new();
    for (name, t) in records {
        if store.by_name(&name).is_none() {
            return Err(Error::Checkpoint(format!("unknown parameter {name}")));
        }
        loaded.add(name, t)?;
    }
    store.copy_values_from(&loaded)
}

//! Parameter container: `GDMSR1`, a `u32` little-endian header length, a
//! JSON header listing tensor names, shapes and byte offsets, then the
//! tensors as little-endian `f32`.

use std::path::Path;

use gdmsr_numerics::{ParamStore, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const MAGIC: &[u8; 6] = b"GDMSR1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
}

pub fn encode<T: Real>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, name, t) in store.iter() {
        entries.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel() * 4;
    }
    let header = serde_json::to_vec(&Header { tensors: entries })?;
    let len =
        u32::try_from(header.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, t) in store.iter() {
        for x in t.data() {
            out.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut len = [0u8; 4];
    len.copy_from_slice(&bytes[6..10]);
    let len = u32::from_le_bytes(len) as usize;
    let body = 10 + len;
    if bytes.len() < body {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[10..body])?;
    let data = &bytes[body..];
    let mut store = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 4;
        if end > data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} runs past the end",
                e.name
            )));
        }
        let values = data[e.offset..end]
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        store.add(e.name, Tensor::new(e.shape, values)?);
    }
    Ok(store)
}

pub fn save<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    std::fs::write(path, encode(store)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

//! Versioned binary parameter checkpoints.
//!
//! Layout: magic `LMOL`, format version (u16 LE), tensor count (u64 LE),
//! then per tensor: name length (u32 LE) + UTF-8 name, rank (u32 LE),
//! dims (u64 LE each), little-endian f64 payload. Each parameter `p` is
//! written as `p` plus `p.adam_m`, `p.adam_v` and a scalar `p.adam_t`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::{Param, ParamError, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LMOL";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error in {section}: {source}")]
    Io {
        section: &'static str,
        #[source]
        source: io::Error,
    },
    #[error("bad magic bytes {found:?}, expected \"LMOL\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found}")]
    UnsupportedVersion { found: u16 },
    #[error("truncated checkpoint while reading {section}")]
    Truncated { section: &'static str },
    #[error("tensor `{name}`: {source}")]
    BadTensor {
        name: String,
        #[source]
        source: crate::tensor::TensorError,
    },
    #[error("invalid UTF-8 in tensor name")]
    BadName,
    #[error("store `{prefix}` is incomplete: missing `{missing}`")]
    IncompleteStore { prefix: String, missing: String },
    #[error(transparent)]
    Param(#[from] ParamError),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated { section });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, section: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().unwrap()))
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_stores(stores: &[(&str, &ParamStore)]) -> Vec<u8> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (prefix, store) in stores {
        for (name, param) in store.iter() {
            let full = if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}/{name}")
            };
            tensors.push((full.clone(), param.value.clone()));
            tensors.push((format!("{full}.adam_m"), param.adam_m.clone()));
            tensors.push((format!("{full}.adam_v"), param.adam_v.clone()));
            tensors.push((
                format!("{full}.adam_t"),
                Tensor::scalar(param.adam_t as f64),
            ));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, tensor) in &tensors {
        write_tensor(&mut out, name, tensor);
    }
    out
}

/// Serialises several stores into one checkpoint, namespaced by prefix.
pub fn save_stores(path: &Path, stores: &[(&str, &ParamStore)]) -> Result<(), CheckpointError> {
    let bytes = encode_stores(stores);
    let mut file = fs::File::create(path).map_err(|source| CheckpointError::Io {
        section: "create",
        source,
    })?;
    file.write_all(&bytes).map_err(|source| CheckpointError::Io {
        section: "write",
        source,
    })?;
    Ok(())
}

pub fn save_store(path: &Path, store: &ParamStore) -> Result<(), CheckpointError> {
    save_stores(path, &[("", store)])
}

fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic.try_into().unwrap(),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let count = r.u64("tensor count")?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 8, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|source| CheckpointError::BadTensor {
                name: name.clone(),
                source,
            })?;
        map.insert(name, tensor);
    }
    Ok(map)
}

/// Loads a checkpoint back into one store per prefix.
pub fn load_stores(path: &Path) -> Result<BTreeMap<String, ParamStore>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        section: "read",
        source,
    })?;
    let tensors = decode_tensors(&bytes)?;

    let mut stores: BTreeMap<String, ParamStore> = BTreeMap::new();
    for (full_name, value) in &tensors {
        if full_name.ends_with(".adam_m")
            || full_name.ends_with(".adam_v")
            || full_name.ends_with(".adam_t")
        {
            continue;
        }
        let (prefix, name) = match full_name.split_once('/') {
            Some((p, n)) => (p.to_string(), n.to_string()),
            None => (String::new(), full_name.clone()),
        };
        let fetch = |suffix: &str| -> Result<&Tensor, CheckpointError> {
            tensors
                .get(&format!("{full_name}{suffix}"))
                .ok_or_else(|| CheckpointError::IncompleteStore {
                    prefix: prefix.clone(),
                    missing: format!("{full_name}{suffix}"),
                })
        };
        let param = Param {
            value: value.clone(),
            adam_m: fetch(".adam_m")?.clone(),
            adam_v: fetch(".adam_v")?.clone(),
            adam_t: fetch(".adam_t")?.data()[0] as u64,
        };
        stores
            .entry(prefix)
            .or_default()
            .insert_with_state(name, param)?;
    }
    Ok(stores)
}

pub fn load_store(path: &Path) -> Result<ParamStore, CheckpointError> {
    let mut stores = load_stores(path)?;
    Ok(stores.remove("").unwrap_or_default())
}

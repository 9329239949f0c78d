//! Versioned binary checkpoints: magic, schema version, a JSON header with
//! the tensor index, then raw little-endian f64 data. Writes are atomic.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ParameterSet;
use crate::rng::RngState;

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PCLSRCKP";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// The resolved training configuration, stored verbatim.
    pub config: serde_json::Value,
    /// One state per data lane.
    pub rng: Vec<RngState>,
    pub counters: BTreeMap<String, u64>,
    pub tensors: ParameterSet,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    config: serde_json::Value,
    rng: Vec<RngState>,
    counters: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in self.tensors.iter() {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            step: self.step,
            config: self.config.clone(),
            rng: self.rng.clone(),
            counters: self.counters.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.tensors.iter() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: version,
                expected: SCHEMA_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body])?;
        let data = &bytes[body..];
        let mut tensors = ParameterSet::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize * 8;
            let chunk = data
                .get(start..start + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} extends past end of file", e.name)))?;
            let values: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let arr = ArrayD::from_shape_vec(e.shape, values).map_err(|err| Error::Checkpoint(err.to_string()))?;
            tensors.insert(e.name, arr);
        }
        Ok(Checkpoint {
            step: header.step,
            config: header.config,
            rng: header.rng,
            counters: header.counters,
            tensors,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        self.counters
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing counter {name}")))
    }
}

// Checkpoint directory layout:
//
//   manifest.json    format tag, version, caller metadata, tensor index
//                    (key, shape, element offset) and the SHA-256 of params.bin
//   params.bin       every tensor's values as little-endian f64, in index order
//   manifest.sha256  hex SHA-256 of manifest.json

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use crate::tensor::Tensor;

const FORMAT: &str = "nasforge-params";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {message}")]
    Corrupt { path: String, message: String },
}

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
    data_sha256: String,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `store` and `meta` into directory `dir` (created if missing).
pub fn save_params(dir: &Path, meta: serde_json::Value, store: &ParamStore) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut data = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (k, t) in store.iter() {
        tensors.push(Entry {
            key: k.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        meta,
        tensors,
        data_sha256: sha_hex(&data),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let p = dir.join("params.bin");
    std::fs::write(&p, &data).map_err(io(&p))?;
    let p = dir.join("manifest.json");
    std::fs::write(&p, text.as_bytes()).map_err(io(&p))?;
    let p = dir.join("manifest.sha256");
    std::fs::write(&p, format!("{}\n", sha_hex(text.as_bytes()))).map_err(io(&p))?;
    Ok(())
}

/// Reads a checkpoint written by [`save_params`], verifying both digests.
pub fn load_params(dir: &Path) -> Result<(serde_json::Value, ParamStore), CheckpointError> {
    let corrupt = |message: String| CheckpointError::Corrupt {
        path: dir.display().to_string(),
        message,
    };
    let mp = dir.join("manifest.json");
    let text = std::fs::read(&mp).map_err(io(&mp))?;
    let dp = dir.join("manifest.sha256");
    let digest = std::fs::read_to_string(&dp).map_err(io(&dp))?;
    if digest.trim() != sha_hex(&text) {
        return Err(corrupt("manifest digest mismatch".into()));
    }
    let m: Manifest = serde_json::from_slice(&text).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(corrupt(format!("unsupported format {} v{}", m.format, m.version)));
    }
    let pp = dir.join("params.bin");
    let data = std::fs::read(&pp).map_err(io(&pp))?;
    if sha_hex(&data) != m.data_sha256 {
        return Err(corrupt("params.bin digest mismatch".into()));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::new();
    for e in m.tensors {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| corrupt(format!("tensor {} out of range", e.key)))?;
        let t = Tensor::new(e.shape, slice.to_vec()).map_err(|err| corrupt(err.to_string()))?;
        store.insert(e.key, t);
    }
    Ok((m.meta, store))
}

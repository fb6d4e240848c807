// Binary columnar dataset cache, little-endian throughout:
//
//   magic "NFDS" | version u32 | rows u64 | num_dense u32 | num_sparse u32
//   vocab u64 × num_sparse
//   dense columns: f64 × rows, one column after another
//   sparse columns: u32 × rows, one column after another
//   labels: u8 × rows

use std::path::Path;

use super::{Dataset, FeatureSpec};

const MAGIC: &[u8; 4] = b"NFDS";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

pub(crate) fn encode(d: &Dataset) -> Vec<u8> {
    let (n, nd, ns) = (d.len(), d.spec.num_dense, d.spec.num_sparse());
    let mut out = Vec::with_capacity(24 + 8 * ns + n * (8 * nd + 4 * ns + 1));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(nd as u32).to_le_bytes());
    out.extend_from_slice(&(ns as u32).to_le_bytes());
    for &v in &d.spec.vocab {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for j in 0..nd {
        for r in 0..n {
            out.extend_from_slice(&d.dense[r * nd + j].to_le_bytes());
        }
    }
    for f in 0..ns {
        for r in 0..n {
            out.extend_from_slice(&d.ids[r * ns + f].to_le_bytes());
        }
    }
    out.extend(d.labels.iter().map(|&y| u8::from(y > 0.5)));
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode(buf: &[u8]) -> Result<Dataset, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a dataset cache (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported cache version {version}"));
    }
    let n = r.u64()? as usize;
    let nd = r.u32()? as usize;
    let ns = r.u32()? as usize;
    let vocab = (0..ns).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let spec = FeatureSpec { num_dense: nd, vocab };
    let mut d = Dataset {
        spec,
        dense: vec![0.0; n * nd],
        ids: vec![0; n * ns],
        labels: Vec::with_capacity(n),
    };
    for j in 0..nd {
        let col = r.take(8 * n)?;
        for (i, c) in col.chunks_exact(8).enumerate() {
            d.dense[i * nd + j] = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
    }
    for f in 0..ns {
        let col = r.take(4 * n)?;
        for (i, c) in col.chunks_exact(4).enumerate() {
            let id = u32::from_le_bytes(c.try_into().expect("4 bytes"));
            if id as usize >= d.spec.vocab[f] {
                return Err(format!("row {i} field {f}: id {id} outside vocabulary {}", d.spec.vocab[f]));
            }
            d.ids[i * ns + f] = id;
        }
    }
    d.labels.extend(r.take(n)?.iter().map(|&b| f64::from(b)));
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok(d)
}

pub fn write_cache(d: &Dataset, path: &Path) -> Result<(), CacheError> {
    std::fs::write(path, encode(d)).map_err(|source| CacheError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_cache(path: &Path) -> Result<Dataset, CacheError> {
    let buf = std::fs::read(path).map_err(|source| CacheError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&buf).map_err(|message| CacheError::Format {
        path: path.display().to_string(),
        message,
    })
}

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::{Dataset, FeatureSpec};

#[derive(Debug, thiserror::Error)]
pub enum TsvError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected {expected} tab-separated columns, found {found}")]
    Columns { line: usize, expected: usize, found: usize },
    #[error("line {line}, column {column}: {message}")]
    Field {
        line: usize,
        column: usize,
        message: String,
    },
}

/// FNV-1a over the field index and the token bytes; stable across runs and
/// platforms.
pub fn hash_token(field: usize, token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in (field as u32).to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Parses `label \t dense… \t sparse…` rows. Dense values become
/// `ln(1 + max(x, 0))` (missing → 0); sparse tokens hash into
/// `1..vocab` (missing → 0).
pub fn load_criteo_tsv(path: &Path, spec: &FeatureSpec) -> Result<Dataset, TsvError> {
    let file = File::open(path).map_err(|source| TsvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_reader(BufReader::new(file), spec, &path.display().to_string())
}

fn parse_reader(r: impl BufRead, spec: &FeatureSpec, path: &str) -> Result<Dataset, TsvError> {
    let expected = 1 + spec.num_dense + spec.num_sparse();
    let mut out = Dataset::empty(spec.clone());
    let (mut dense, mut ids) = (Vec::new(), Vec::new());
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| TsvError::Io {
            path: path.to_string(),
            source,
        })?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != expected {
            return Err(TsvError::Columns {
                line: line_no,
                expected,
                found: cols.len(),
            });
        }
        let field_err = |column: usize, message: String| TsvError::Field {
            line: line_no,
            column,
            message,
        };
        let label = match cols[0] {
            "0" => 0.0,
            "1" => 1.0,
            other => return Err(field_err(1, format!("label must be 0 or 1, found {other:?}"))),
        };
        dense.clear();
        ids.clear();
        for (j, c) in cols[1..=spec.num_dense].iter().enumerate() {
            let v = if c.is_empty() {
                0.0
            } else {
                let x: i64 = c
                    .parse()
                    .map_err(|_| field_err(j + 2, format!("dense value {c:?} is not an integer")))?;
                (x.max(0) as f64).ln_1p()
            };
            dense.push(v);
        }
        for (f, c) in cols[1 + spec.num_dense..].iter().enumerate() {
            let id = if c.is_empty() {
                0
            } else {
                let v = spec.vocab[f] as u64;
                1 + hash_token(f, c) % (v - 1)
            };
            ids.push(id as u32);
        }
        out.push(&dense, &ids, label);
    }
    Ok(out)
}

//! Output directories: echoed config, JSON-lines log and artifact writers.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nasforge_core::data::{read_cache, write_cache};
use nasforge_core::{split, synth_generate, Dataset, Split};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Stage};
use crate::{invalid, runtime, Result};

/// Directory receiving one command's artifacts.
pub struct OutDir {
    pub path: PathBuf,
    log: File,
    start: Instant,
}

impl OutDir {
    /// Creates `path`, echoes `cfg` into `config.json` and opens `log.jsonl`
    /// for appending.
    pub fn create(path: &Path, cfg: &RunConfig) -> Result<OutDir> {
        std::fs::create_dir_all(path).map_err(|e| runtime(format!("cannot create {}: {e}", path.display())))?;
        let text = serde_json::to_string_pretty(cfg).map_err(runtime)? + "\n";
        std::fs::write(path.join("config.json"), text).map_err(runtime)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path.join("log.jsonl"))
            .map_err(runtime)?;
        Ok(OutDir {
            path: path.to_path_buf(),
            log,
            start: Instant::now(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Appends one event line; `fields` must be a JSON object.
    pub fn log(&mut self, event: &str, fields: Value) {
        let mut v = json!({ "event": event, "elapsed_ms": self.start.elapsed().as_millis() as u64 });
        if let (Some(o), Value::Object(f)) = (v.as_object_mut(), fields) {
            o.extend(f);
        }
        let _ = writeln!(self.log, "{v}");
        let _ = self.log.flush();
    }

    pub fn write(&self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.file(name), text).map_err(|e| runtime(format!("cannot write {name}: {e}")))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, v: &T) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(v).map_err(runtime)? + "\n"))
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(invalid(format!("dataset {} not found", path.display())));
    }
    read_cache(path).map_err(|e| invalid(format!("dataset {}: {e}", path.display())))
}

/// Deterministic train/validation/test split of the run.
pub fn split_run(data: &Dataset, cfg: &RunConfig) -> Split {
    split(data, cfg.stage_seed(Stage::Split))
}

/// Synthesizes the configured dataset, reusing a copy from `NASFORGE_CACHE`
/// when one with the same parameters exists.
pub fn synth_cached(cfg: &RunConfig) -> Result<(Dataset, bool)> {
    let synth = cfg.data.synth();
    let key = hex::encode(Sha256::digest(serde_json::to_vec(&synth).map_err(runtime)?));
    let cached = std::env::var_os("NASFORGE_CACHE").map(|d| PathBuf::from(d).join(format!("synth-{}.bin", &key[..16])));
    if let Some(p) = &cached {
        if p.exists() {
            if let Ok(d) = read_cache(p) {
                return Ok((d, true));
            }
        }
    }
    let d = synth_generate(&synth);
    if let Some(p) = &cached {
        if let Some(dir) = p.parent() {
            let _ = std::fs::create_dir_all(dir);
        }
        write_cache(&d, p).map_err(runtime)?;
    }
    Ok((d, false))
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    write_cache(d, path).map_err(runtime)
}

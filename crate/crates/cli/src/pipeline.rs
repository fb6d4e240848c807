//! End-to-end run: data, supernet, evolution, selection. Each stage writes
//! into its own subdirectory and leaves a `DONE` marker; completed stages
//! are skipped on rerun.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nasforge_core::evolution::read_history;
use nasforge_core::{Dataset, Supernet};
use serde_json::json;

use crate::commands::{evolve_cmd, select_cmd, synth_data, train_supernet_cmd};
use crate::config::RunConfig;
use crate::output::{read_dataset, OutDir};
use crate::{invalid, runtime, Result};

const STAGES: [&str; 4] = ["data", "supernet", "evolve", "select"];

fn done(dir: &Path) -> bool {
    dir.join("DONE").exists()
}

fn mark(dir: &Path) -> Result<()> {
    std::fs::write(dir.join("DONE"), "").map_err(runtime)
}

/// Path of an artifact produced by `stage`; fails naming the stage when absent.
fn upstream(out: &Path, stage: &str, name: &str) -> Result<PathBuf> {
    let p = out.join(stage).join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(invalid(format!(
            "stage {stage} is missing {}; delete {}/DONE to rerun it",
            p.display(),
            out.join(stage).display()
        )))
    }
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let mut root = OutDir::create(out, cfg)?;
    let dir = |s: &str| out.join(s);

    let mut data: Option<Dataset> = None;
    if done(&dir("data")) {
        root.log("stage.skip", json!({ "stage": "data" }));
    } else {
        data = Some(synth_data(cfg, &dir("data"))?);
        mark(&dir("data"))?;
    }
    let data = match data {
        Some(d) => d,
        None => read_dataset(&upstream(out, "data", "dataset.bin")?)?,
    };

    let mut net: Option<Supernet> = None;
    if done(&dir("supernet")) {
        root.log("stage.skip", json!({ "stage": "supernet" }));
    } else {
        net = Some(train_supernet_cmd(cfg, &data, &dir("supernet"))?);
        mark(&dir("supernet"))?;
    }

    let history = if done(&dir("evolve")) {
        root.log("stage.skip", json!({ "stage": "evolve" }));
        read_history(&upstream(out, "evolve", "history.jsonl")?).map_err(invalid)?
    } else {
        let net = match net {
            Some(n) => n,
            None => {
                let p = upstream(out, "supernet", "supernet")?;
                Supernet::load(&p).map_err(|e| invalid(format!("stage supernet: {e}")))?
            }
        };
        let h = evolve_cmd(cfg, &net, &data, &dir("evolve"), false)?;
        mark(&dir("evolve"))?;
        h
    };

    if done(&dir("select")) {
        root.log("stage.skip", json!({ "stage": "select" }));
        upstream(out, "select", "report.json")?;
    } else {
        select_cmd(cfg, &history, &data, &dir("select"))?;
        mark(&dir("select"))?;
    }

    let text = std::fs::read_to_string(upstream(out, "select", "report.json")?).map_err(runtime)?;
    let sel: serde_json::Value = serde_json::from_str(&text).map_err(runtime)?;
    let report = json!({
        "seed": cfg.seed,
        "rows": data.len(),
        "stages": STAGES,
        "test_log_loss": sel["test_log_loss"],
        "test_auc": sel["test_auc"],
        "val_log_loss": sel["val_log_loss"],
        "mflops": sel["mflops"],
        "elapsed_s": start.elapsed().as_secs_f64(),
    });
    root.write_json("report.json", &report)?;
    root.write(
        "report.csv",
        &format!(
            "seed,rows,test_log_loss,test_auc,mflops\n{},{},{},{},{}\n",
            cfg.seed,
            data.len(),
            sel["test_log_loss"],
            sel["test_auc"],
            sel["mflops"]
        ),
    )?;
    root.log("pipeline.done", report);
    Ok(())
}

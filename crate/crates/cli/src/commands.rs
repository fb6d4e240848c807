use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use nasforge_core::data::load_criteo_tsv;
use nasforge_core::evolution::{
    best, read_history, select_top_k, supernet_fitness, HistoryWriter, SearchRecord, Selected,
};
use nasforge_core::pim::{cosearch, genotype_cost, genotype_tiles, pareto_csv, CostReport};
use nasforge_core::pruning::{prune, report_csv, Variant};
use nasforge_core::ranking::rank_experiment;
use nasforge_core::space::to_dot;
use nasforge_core::supernet::{genotype_flops, genotype_params, prune_unreachable, Layout};
use nasforge_core::trainer::{evaluate, train_model, train_supernet};
use nasforge_core::{evolve, Dataset, EvalMetrics, Genotype, HwConfig, Model, Supernet, TrainConfig};
use serde_json::json;

use crate::config::{space_preset, RunConfig};
use crate::output::{read_dataset, save_dataset, split_run, synth_cached, OutDir};
use crate::{invalid, runtime, Cli, Command, PruneVariant, Result};

/// Loads the run config and applies the global flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(name) = &cli.space {
        cfg.space = space_preset(name)?;
    }
    cfg.derive_seeds();
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(k) = cli.workers {
        if k == 0 {
            return Err(invalid("--workers must be positive"));
        }
        // A pool may already exist when embedded; the first one wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    let mut cfg = resolve_config(cli)?;
    match &cli.command {
        Command::SynthData(a) => {
            let d = &mut cfg.data;
            d.rows = a.rows.unwrap_or(d.rows);
            d.dense = a.dense.unwrap_or(d.dense);
            d.sparse = a.sparse.unwrap_or(d.sparse);
            d.vocab = a.vocab.unwrap_or(d.vocab);
            cfg.check()?;
            synth_data(&cfg, &cli.out).map(|_| ())
        }
        Command::Ingest(a) => {
            cfg.data.dense = a.dense;
            cfg.data.sparse = a.sparse;
            cfg.data.vocab = a.vocab;
            ingest(&cfg, &a.input, &cli.out)
        }
        Command::TrainSupernet(a) => {
            if let Some(s) = a.strategy {
                cfg.sampling = s.into();
            }
            cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
            cfg.train.max_steps = a.max_steps.or(cfg.train.max_steps);
            cfg.check()?;
            let data = read_dataset(&a.data)?;
            train_supernet_cmd(&cfg, &data, &cli.out).map(|_| ())
        }
        Command::Evolve(a) => {
            let e = &mut cfg.evolution;
            e.population_size = a.population.unwrap_or(e.population_size);
            e.iterations = a.iters.unwrap_or(e.iterations);
            e.tournament = a.tournament.unwrap_or(e.tournament);
            e.children_per_iter = a.children.unwrap_or(e.children_per_iter);
            cfg.check()?;
            let net = load_supernet(&a.supernet)?;
            let data = read_dataset(&a.data)?;
            evolve_cmd(&cfg, &net, &data, &cli.out, a.resume).map(|_| ())
        }
        Command::SelectTop(a) => {
            cfg.select.top_k = a.k.unwrap_or(cfg.select.top_k);
            cfg.check()?;
            let history = read_history(&a.history).map_err(invalid)?;
            let data = read_dataset(&a.data)?;
            select_cmd(&cfg, &history, &data, &cli.out).map(|_| ())
        }
        Command::RankEval(a) => {
            cfg.ranking.n_subnets = a.n.unwrap_or(cfg.ranking.n_subnets);
            cfg.ranking.finetune |= a.finetune;
            cfg.check()?;
            let net = load_supernet(&a.supernet)?;
            let data = read_dataset(&a.data)?;
            rank_cmd(&cfg, &net, &data, &cli.out)
        }
        Command::Prune(a) => {
            cfg.pruning.global |= a.global;
            cfg.pruning.iterations = a.iterations.unwrap_or(cfg.pruning.iterations);
            cfg.pruning.steps = a.steps.unwrap_or(cfg.pruning.steps);
            cfg.check()?;
            let model = Model::load(&a.model).map_err(|e| invalid(format!("model {}: {e}", a.model.display())))?;
            let data = read_dataset(&a.data)?;
            prune_cmd(&cfg, &model, &data, a.variant, &cli.out)
        }
        Command::Cosim(a) => {
            if let Some(p) = &a.hw {
                cfg.hw = HwConfig::load(p).map_err(|e| invalid(format!("hw config {}: {e}", p.display())))?;
            }
            cfg.cosim.beta = a.beta.unwrap_or(cfg.cosim.beta);
            cfg.check()?;
            match (&a.genotype, &a.supernet, &a.data) {
                (Some(g), _, _) => cost_cmd(&cfg, &read_genotype(g, &cfg)?, &cli.out),
                (None, Some(s), Some(d)) => {
                    let net = load_supernet(s)?;
                    let data = read_dataset(d)?;
                    cosearch_cmd(&cfg, &net, &data, &cli.out)
                }
                _ => Err(invalid("cosim needs --genotype or both --supernet and --data")),
            }
        }
        Command::Flops(a) => {
            cfg.check()?;
            flops_cmd(&cfg, &read_genotype(&a.genotype, &cfg)?, &cli.out)
        }
        Command::ExportDot(a) => {
            let text = std::fs::read_to_string(&a.genotype).map_err(|e| invalid(format!("{}: {e}", a.genotype.display())))?;
            let g = Genotype::from_json(&text).map_err(invalid)?;
            let out = OutDir::create(&cli.out, &cfg)?;
            out.write("genotype.dot", &to_dot(&g))
        }
        Command::Pipeline => {
            cfg.check()?;
            crate::pipeline::run(&cfg, &cli.out)
        }
    }
}

fn read_genotype(path: &Path, cfg: &RunConfig) -> Result<Genotype> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let g = Genotype::from_json(&text).map_err(invalid)?;
    g.validate(&cfg.space).map_err(|v| {
        let msgs: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        invalid(format!("genotype {} does not fit the space: {}", path.display(), msgs.join("; ")))
    })?;
    Ok(g)
}

fn load_supernet(dir: &Path) -> Result<Supernet> {
    Supernet::load(dir).map_err(|e| invalid(format!("supernet {}: {e}", dir.display())))
}

pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let mut o = OutDir::create(out, cfg)?;
    let (d, hit) = synth_cached(cfg)?;
    save_dataset(&d, &o.file("dataset.bin"))?;
    let summary = json!({
        "rows": d.len(),
        "num_dense": d.spec.num_dense,
        "num_sparse": d.spec.num_sparse(),
        "checksum": d.checksum(),
        "positive_rate": d.positive_rate(),
    });
    o.write_json("dataset.json", &summary)?;
    o.log("synth-data", json!({ "rows": d.len(), "cache_hit": hit, "checksum": d.checksum() }));
    println!("{} rows, checksum {}", d.len(), d.checksum());
    Ok(d)
}

fn ingest(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let spec = cfg.data.spec();
    spec.check().map_err(invalid)?;
    let d = load_criteo_tsv(input, &spec).map_err(invalid)?;
    let mut o = OutDir::create(out, cfg)?;
    save_dataset(&d, &o.file("dataset.bin"))?;
    o.write_json("dataset.json", &json!({ "rows": d.len(), "checksum": d.checksum(), "positive_rate": d.positive_rate() }))?;
    o.log("ingest", json!({ "input": input.display().to_string(), "rows": d.len() }));
    println!("{} rows, checksum {}", d.len(), d.checksum());
    Ok(())
}

pub fn train_supernet_cmd(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<Supernet> {
    let mut o = OutDir::create(out, cfg)?;
    let sp = split_run(data, cfg);
    let mut net = Supernet::build(&cfg.space, &data.spec, cfg.train.seed).map_err(invalid)?;
    o.log("train-supernet.start", json!({ "rows": sp.train.len(), "steps": cfg.train.total_steps(sp.train.len()) }));
    let h = train_supernet(&mut net, cfg.sampling, &sp.train, &sp.val, &cfg.train).map_err(runtime)?;
    for r in &h.rows {
        o.log("train", serde_json::to_value(r).map_err(runtime)?);
    }
    o.write("train_metrics.csv", &h.to_csv())?;
    net.save(&o.file("supernet")).map_err(runtime)?;
    let fin = h.final_val.map(|m| json!({ "val_log_loss": m.log_loss, "val_auc": m.auc }));
    o.write_json("summary.json", &json!({ "steps": h.steps, "checksum": net.checksum(), "final": fin }))?;
    o.log("train-supernet.done", json!({ "steps": h.steps }));
    println!("trained supernet for {} steps", h.steps);
    Ok(net)
}

fn evolution_csv(history: &[SearchRecord]) -> String {
    let mut s = String::from("id,iteration,parent,fitness,invalid\n");
    for r in history {
        let parent = r.parent.map(|p| p.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{:.6},{}\n", r.id, r.iteration, parent, r.fitness, r.invalid));
    }
    s
}

pub fn evolve_cmd(cfg: &RunConfig, net: &Supernet, data: &Dataset, out: &Path, resume: bool) -> Result<Vec<SearchRecord>> {
    let mut o = OutDir::create(out, cfg)?;
    let sp = split_run(data, cfg);
    let val = match cfg.search.eval_rows {
        Some(n) => sp.val.head(n.min(sp.val.len())),
        None => sp.val,
    };
    let path = o.file("history.jsonl");
    let prior = if resume && path.exists() {
        read_history(&path).map_err(invalid)?
    } else {
        Vec::new()
    };
    // Rewrite the file so a truncated tail line is dropped before appending.
    std::fs::write(&path, nasforge_core::evolution::history_to_jsonl(&prior)).map_err(runtime)?;
    let mut writer = HistoryWriter::create(&path, true).map_err(runtime)?;
    o.log("evolve.start", json!({ "resumed_records": prior.len(), "target": cfg.evolution.history_len() }));
    let ft = cfg.search.finetune.as_ref().map(|f| (f, &sp.train));
    let fitness = |g: &Genotype| supernet_fitness(net, g, &val, cfg.search.eval_batch_size, ft);
    let mut io_err = None;
    let history = evolve(&fitness, &cfg.evolution, &net.space, prior, &mut |r| {
        if let Err(e) = writer.write(r) {
            io_err.get_or_insert(e);
        }
    })
    .map_err(invalid)?;
    if let Some(e) = io_err {
        return Err(runtime(e));
    }
    o.write("evolution.csv", &evolution_csv(&history))?;
    let b = best(&history).ok_or_else(|| runtime("empty history"))?;
    o.write("best.json", &(b.genotype.to_json_pretty() + "\n"))?;
    o.log("evolve.done", json!({ "records": history.len(), "best_id": b.id, "best_fitness": b.fitness }));
    println!("{} records, best #{} fitness {:.6}", history.len(), b.id, b.fitness);
    Ok(history)
}

/// Outcome of retraining the best searched architectures.
pub struct SelectOutcome {
    pub selected: Vec<Selected>,
    pub model: Model,
    pub test: EvalMetrics,
}

pub fn select_cmd(cfg: &RunConfig, history: &[SearchRecord], data: &Dataset, out: &Path) -> Result<SelectOutcome> {
    let mut o = OutDir::create(out, cfg)?;
    let sp = split_run(data, cfg);
    let space = history
        .first()
        .map(|_| cfg.space.clone())
        .ok_or_else(|| invalid("search history is empty"))?;
    // Keep the best model per genotype so the winner need not be retrained.
    let kept: Mutex<HashMap<Genotype, (f64, Model)>> = Mutex::new(HashMap::new());
    let retrain = |g: &Genotype, lr: f64| {
        let tc = TrainConfig {
            lr0: lr,
            ..cfg.select.train.clone()
        };
        let mut m = Model::init(&space, &data.spec, g, tc.seed)
            .map_err(|e| nasforge_core::trainer::TrainError::Config(e.to_string()))?;
        train_model(&mut m, &sp.train, &sp.val, &tc)?;
        let v = evaluate(&m, g, &sp.val, tc.eval_batch_size)?;
        let mut k = kept.lock().expect("model map");
        let better = k.get(g).is_none_or(|(l, _)| v.log_loss < *l);
        if better {
            k.insert(g.clone(), (v.log_loss, m));
        }
        Ok(v)
    };
    let selected = select_top_k(history, cfg.select.top_k, &cfg.select.lrs, retrain).map_err(runtime)?;
    let winner = selected.first().ok_or_else(|| runtime("nothing selected"))?;
    let model = kept
        .lock()
        .expect("model map")
        .remove(&winner.record.genotype)
        .map(|(_, m)| m)
        .ok_or_else(|| runtime("winning model missing"))?;
    let test = evaluate(&model, &model.genotype, &sp.test, cfg.select.train.eval_batch_size).map_err(runtime)?;
    let mut csv = String::from("rank,id,supernet_fitness,lr,val_log_loss,val_auc\n");
    for (i, s) in selected.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{:.6},{},{:.6},{:.6}\n",
            i + 1,
            s.record.id,
            s.record.fitness,
            s.lr,
            s.val.log_loss,
            s.val.auc
        ));
    }
    o.write("selected.csv", &csv)?;
    o.write("best.json", &(model.genotype.to_json_pretty() + "\n"))?;
    model.save(&o.file("model")).map_err(runtime)?;
    let report = json!({
        "id": winner.record.id,
        "lr": winner.lr,
        "val_log_loss": winner.val.log_loss,
        "val_auc": winner.val.auc,
        "test_log_loss": test.log_loss,
        "test_auc": test.auc,
        "mflops": model.flops() as f64 / 1e6,
        "params": model.param_count(),
    });
    o.write_json("report.json", &report)?;
    o.log("select-top.done", report);
    println!("best #{} test log loss {:.6} auc {:.4}", winner.record.id, test.log_loss, test.auc);
    Ok(SelectOutcome {
        selected,
        model,
        test,
    })
}

fn rank_cmd(cfg: &RunConfig, net: &Supernet, data: &Dataset, out: &Path) -> Result<()> {
    let mut o = OutDir::create(out, cfg)?;
    let sp = split_run(data, cfg);
    let r = rank_experiment(net, &sp.train, &sp.val, &cfg.ranking).map_err(runtime)?;
    let mut csv = String::from("subnet,supernet_log_loss,scratch_log_loss\n");
    for (i, (a, b)) in r.report.pairs.iter().enumerate() {
        csv.push_str(&format!("{i},{a:.6},{b:.6}\n"));
    }
    o.write("ranking.csv", &csv)?;
    o.write("cdf.csv", &r.cdf)?;
    o.write_json("ranking.json", &r.report)?;
    o.log("rank-eval.done", json!({ "n": r.report.n, "tau": r.report.tau, "rho": r.report.rho }));
    let f = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    println!("n={} tau={} rho={}", r.report.n, f(r.report.tau), f(r.report.rho));
    Ok(())
}

fn prune_cmd(cfg: &RunConfig, model: &Model, data: &Dataset, which: PruneVariant, out: &Path) -> Result<()> {
    let mut o = OutDir::create(out, cfg)?;
    let sp = split_run(data, cfg);
    let variants: &[Variant] = match which {
        PruneVariant::Mask => &[Variant::Mask],
        PruneVariant::Magnitude => &[Variant::Magnitude],
        PruneVariant::Both => &[Variant::Mask, Variant::Magnitude],
    };
    let mut rows = Vec::new();
    for &v in variants {
        let r = prune(model, &sp.train, &sp.val, v, &cfg.pruning).map_err(runtime)?;
        for row in &r.rows {
            o.log("prune", serde_json::to_value(row).map_err(runtime)?);
        }
        r.model.save(&o.file(&format!("model-{}", v.name()))).map_err(runtime)?;
        rows.extend(r.rows);
    }
    o.write("prune.csv", &report_csv("synthetic", &rows))?;
    println!("{} pruning rows", rows.len());
    Ok(())
}

fn cost_cmd(cfg: &RunConfig, g: &Genotype, out: &Path) -> Result<()> {
    let mut o = OutDir::create(out, cfg)?;
    let layout = Layout::new(&cfg.space, &cfg.data.spec());
    let act = cfg.cosim.act_bits;
    let report: CostReport = genotype_cost(&layout, g, act, &cfg.hw);
    let mut csv = String::from("block,kind,crossbars,digital_macs\n");
    for (b, p) in genotype_tiles(&layout, g, act, &cfg.hw) {
        csv.push_str(&format!("{b},{:?},{},{}\n", p.kind, p.crossbar_count(), p.digital_macs));
    }
    o.write("tiles.csv", &csv)?;
    o.write_json("cost.json", &report)?;
    o.log("cosim.cost", serde_json::to_value(report).map_err(runtime)?);
    println!(
        "latency {:.1} ns, energy {:.1} pJ, {} crossbars",
        report.latency_ns, report.energy_pj, report.crossbars
    );
    Ok(())
}

fn cosearch_cmd(cfg: &RunConfig, net: &Supernet, data: &Dataset, out: &Path) -> Result<()> {
    let mut o = OutDir::create(out, cfg)?;
    let sp = split_run(data, cfg);
    let val = match cfg.search.eval_rows {
        Some(n) => sp.val.head(n.min(sp.val.len())),
        None => sp.val,
    };
    let mut writer = HistoryWriter::create(&o.file("history.jsonl"), false).map_err(runtime)?;
    let r = cosearch(net, &val, &cfg.hw, &cfg.cosim, &mut |rec| {
        let _ = writer.write(rec);
    })
    .map_err(invalid)?;
    let mut csv = String::from("genotype_id,loss,latency_ns,energy_pj,area_units,crossbars\n");
    for p in &r.points {
        csv.push_str(&format!(
            "{},{:.6},{:.3},{:.3},{:.3},{}\n",
            p.genotype_id, p.loss, p.cost.latency_ns, p.cost.energy_pj, p.cost.area_units, p.cost.crossbars
        ));
    }
    o.write("design_points.csv", &csv)?;
    o.write("pareto.csv", &pareto_csv(&r.points, &r.pareto))?;
    o.log("cosim.done", json!({ "records": r.history.len(), "pareto": r.pareto.len() }));
    println!("{} designs, {} on the Pareto front", r.points.len(), r.pareto.len());
    Ok(())
}

fn flops_cmd(cfg: &RunConfig, g: &Genotype, out: &Path) -> Result<()> {
    let o = OutDir::create(out, cfg)?;
    let layout = Layout::new(&cfg.space, &cfg.data.spec());
    let p = prune_unreachable(g);
    let flops = genotype_flops(&layout, &p);
    let params = genotype_params(&layout, &p);
    let report = json!({
        "flops": flops,
        "mflops": flops as f64 / 1e6,
        "params": params.total(),
        "params_linear": params.linear(),
        "unused_blocks": p.unused_blocks(),
    });
    o.write_json("flops.json", &report)?;
    println!("{:.4} MFLOPs, {} parameters", flops as f64 / 1e6, params.total());
    Ok(())
}

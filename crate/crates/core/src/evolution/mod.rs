//! Regularized (aging) evolution, the random-search baseline and top-k
//! model selection.

use std::collections::{HashSet, VecDeque};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::space::{mutate, random_genotype, Genotype, SpaceConfig};
use crate::supernet::{extract_subnet, finetune_head, Model, Supernet};
use crate::trainer::{self, EvalMetrics, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvolutionError {
    #[error("invalid evolution config: {0}")]
    Config(String),
    #[error("history {path}: {message}")]
    History { path: String, message: String },
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionConfig {
    pub population_size: usize,
    pub iterations: usize,
    pub tournament: usize,
    pub children_per_iter: usize,
    pub seed: u64,
    /// Re-mutations attempted before a duplicate child is accepted.
    pub max_remutations: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            population_size: 128,
            iterations: 240,
            tournament: 64,
            children_per_iter: 8,
            seed: 0,
            max_remutations: 5,
        }
    }
}

impl EvolutionConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.population_size == 0 {
            return Err("population_size must be positive".into());
        }
        if self.tournament == 0 || self.tournament > self.population_size {
            return Err(format!(
                "tournament ({}) must lie in 1..=population_size ({})",
                self.tournament, self.population_size
            ));
        }
        if self.children_per_iter == 0 || self.children_per_iter > self.population_size {
            return Err("children_per_iter must lie in 1..=population_size".into());
        }
        Ok(())
    }

    /// Records produced by a complete run.
    pub fn history_len(&self) -> usize {
        self.population_size + self.iterations * self.children_per_iter
    }
}

/// One evaluated genotype. `id` is the insertion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRecord {
    pub id: usize,
    /// 0 for the initial population, `t` for children of iteration `t`.
    pub iteration: usize,
    pub parent: Option<usize>,
    /// Lower is better. A NaN fitness is replaced by `f64::MAX`.
    pub fitness: f64,
    /// The raw fitness was NaN.
    pub invalid: bool,
    #[serde(with = "genotype_json")]
    pub genotype: Genotype,
}

mod genotype_json {
    use super::Genotype;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(g: &Genotype, s: S) -> Result<S::Ok, S::Error> {
        g.to_value().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Genotype, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        Genotype::from_value(v).map_err(serde::de::Error::custom)
    }
}

fn record(id: usize, iteration: usize, parent: Option<usize>, genotype: Genotype, raw: f64) -> SearchRecord {
    let invalid = raw.is_nan();
    SearchRecord {
        id,
        iteration,
        parent,
        fitness: if invalid { f64::MAX } else { raw },
        invalid,
        genotype,
    }
}

/// Evaluates fitness for a batch of genotypes concurrently.
fn evaluate_all<F: Fn(&Genotype) -> f64 + Sync>(fitness: &F, gs: &[Genotype]) -> Vec<f64> {
    gs.par_iter().map(fitness).collect()
}

/// Best (lowest fitness, earliest on ties) record.
pub fn best(history: &[SearchRecord]) -> Option<&SearchRecord> {
    history.iter().min_by(|a, b| a.fitness.total_cmp(&b.fitness).then(a.id.cmp(&b.id)))
}

fn stream_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Regularized evolution. `resume` continues from a prefix of a previous
/// run with the same config; `sink` sees every new record in order.
/// Randomness is drawn from one stream per iteration, so a resumed run
/// reproduces an uninterrupted one exactly.
pub fn evolve<F: Fn(&Genotype) -> f64 + Sync>(
    fitness: &F,
    cfg: &EvolutionConfig,
    space: &SpaceConfig,
    resume: Vec<SearchRecord>,
    sink: &mut dyn FnMut(&SearchRecord),
) -> Result<Vec<SearchRecord>, EvolutionError> {
    cfg.check().map_err(EvolutionError::Config)?;
    space.check().map_err(EvolutionError::Config)?;
    let p = cfg.population_size;
    let c = cfg.children_per_iter;
    let mut history = resume;
    if !history.is_empty() && (history.len() < p || !(history.len() - p).is_multiple_of(c) || history.len() > cfg.history_len()) {
        return Err(EvolutionError::Config(format!(
            "resume history has {} records, not a checkpoint of this config",
            history.len()
        )));
    }
    if history.iter().enumerate().any(|(i, r)| r.id != i) {
        return Err(EvolutionError::Config("resume history ids are not contiguous".into()));
    }
    if history.is_empty() {
        let mut rng = stream_rng(cfg.seed, 0);
        let init: Vec<Genotype> = (0..p).map(|_| random_genotype(space, &mut rng)).collect();
        let fit = evaluate_all(fitness, &init);
        for (i, (g, f)) in init.into_iter().zip(fit).enumerate() {
            let r = record(i, 0, None, g, f);
            sink(&r);
            history.push(r);
        }
    }
    let mut seen: HashSet<String> = history.iter().map(|r| r.genotype.to_json()).collect();
    let mut population: VecDeque<usize> = (history.len() - p..history.len()).collect();
    let start = (history.len() - p) / c + 1;
    for t in start..=cfg.iterations {
        let mut rng = stream_rng(cfg.seed, t);
        let members: Vec<usize> = population.iter().copied().collect();
        let parent = *members
            .choose_multiple(&mut rng, cfg.tournament)
            .min_by(|&&a, &&b| history[a].fitness.total_cmp(&history[b].fitness).then(a.cmp(&b)))
            .expect("nonempty tournament");
        let mut children = Vec::with_capacity(c);
        for _ in 0..c {
            let mut child = mutate(&history[parent].genotype, space, &mut rng);
            for _ in 0..cfg.max_remutations {
                if !seen.contains(&child.to_json()) {
                    break;
                }
                child = mutate(&child, space, &mut rng);
            }
            seen.insert(child.to_json());
            children.push(child);
        }
        let fit = evaluate_all(fitness, &children);
        for (g, f) in children.into_iter().zip(fit) {
            let r = record(history.len(), t, Some(parent), g, f);
            sink(&r);
            population.push_back(r.id);
            history.push(r);
        }
        for _ in 0..c {
            population.pop_front();
        }
    }
    Ok(history)
}

/// Evaluates `n_samples` independent random genotypes.
pub fn random_search<F: Fn(&Genotype) -> f64 + Sync>(
    fitness: &F,
    n_samples: usize,
    space: &SpaceConfig,
    seed: u64,
) -> Vec<SearchRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gs: Vec<Genotype> = (0..n_samples).map(|_| random_genotype(space, &mut rng)).collect();
    let fit = evaluate_all(fitness, &gs);
    gs.into_iter()
        .zip(fit)
        .enumerate()
        .map(|(i, (g, f))| record(i, 0, None, g, f))
        .collect()
}

/// Appends records to a JSON-lines file.
pub struct HistoryWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl HistoryWriter {
    pub fn create(path: &Path, append: bool) -> std::io::Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        Ok(HistoryWriter {
            out: std::io::BufWriter::new(f),
        })
    }

    pub fn write(&mut self, r: &SearchRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

pub fn history_to_jsonl(history: &[SearchRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Reads a JSON-lines history; a truncated final line is dropped.
pub fn read_history(path: &Path) -> Result<Vec<SearchRecord>, EvolutionError> {
    let err = |message: String| EvolutionError::History {
        path: path.display().to_string(),
        message,
    };
    let f = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let lines: Vec<String> = std::io::BufReader::new(f)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| err(e.to_string()))?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SearchRecord>(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(err(format!("line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

/// Distinct genotypes of `history`, best first, at most `k`.
pub fn top_k_distinct(history: &[SearchRecord], k: usize) -> Vec<SearchRecord> {
    let mut sorted: Vec<&SearchRecord> = history.iter().collect();
    sorted.sort_by(|a, b| a.fitness.total_cmp(&b.fitness).then(a.id.cmp(&b.id)));
    let mut seen = HashSet::new();
    sorted
        .into_iter()
        .filter(|r| seen.insert(r.genotype.to_json()))
        .take(k)
        .cloned()
        .collect()
}

/// Learning rates tried when retraining a selected architecture.
pub const LR_GRID: [f64; 3] = [0.10, 0.15, 0.20];

/// A selected architecture after retraining from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub record: SearchRecord,
    pub lr: f64,
    pub val: EvalMetrics,
}

/// Takes the `k` best distinct genotypes and retrains each with every
/// learning rate in `lrs`, keeping the best rate per genotype. The result is
/// sorted ascending by from-scratch validation loss. `retrain` returns the
/// validation metrics of one (genotype, lr) run.
pub fn select_top_k<F>(history: &[SearchRecord], k: usize, lrs: &[f64], retrain: F) -> Result<Vec<Selected>, TrainError>
where
    F: Fn(&Genotype, f64) -> Result<EvalMetrics, TrainError> + Sync,
{
    let top = top_k_distinct(history, k);
    let jobs: Vec<(usize, f64)> = (0..top.len()).flat_map(|i| lrs.iter().map(move |&lr| (i, lr))).collect();
    let results: Vec<EvalMetrics> = jobs
        .par_iter()
        .map(|&(i, lr)| retrain(&top[i].genotype, lr))
        .collect::<Result<_, _>>()?;
    let mut out: Vec<Selected> = Vec::with_capacity(top.len());
    for (&(i, lr), m) in jobs.iter().zip(results) {
        let better = match out.last() {
            Some(s) if s.record.id == top[i].id => m.log_loss < s.val.log_loss,
            _ => {
                out.push(Selected {
                    record: top[i].clone(),
                    lr,
                    val: m,
                });
                continue;
            }
        };
        if better {
            let s = out.last_mut().expect("present");
            s.lr = lr;
            s.val = m;
        }
    }
    out.sort_by(|a, b| a.val.log_loss.total_cmp(&b.val.log_loss).then(a.record.id.cmp(&b.record.id)));
    Ok(out)
}

/// Trains `g` from scratch and reports validation metrics.
pub fn retrain_from_scratch(
    space: &SpaceConfig,
    train: &Dataset,
    val: &Dataset,
    g: &Genotype,
    cfg: &TrainConfig,
) -> Result<(Model, EvalMetrics), TrainError> {
    let mut model = Model::init(space, &train.spec, g, cfg.seed).map_err(|e| TrainError::Config(e.to_string()))?;
    trainer::train_model(&mut model, train, val, cfg)?;
    let m = trainer::evaluate(&model, g, val, cfg.eval_batch_size)?;
    Ok((model, m))
}

/// Optional head fine-tuning applied to every candidate before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 500,
            lr: 0.12,
            batch_size: 1024,
            seed: 0,
        }
    }
}

/// Supernet validation log loss of `g`, optionally after fine-tuning the
/// head of the extracted subnet on `tune_data`. Errors map to NaN.
pub fn supernet_fitness(
    net: &Supernet,
    g: &Genotype,
    val: &Dataset,
    batch_size: usize,
    finetune: Option<(&FinetuneConfig, &Dataset)>,
) -> f64 {
    let score = || -> Result<f64, Box<dyn std::error::Error>> {
        match finetune {
            None => Ok(trainer::evaluate(net, g, val, batch_size)?.log_loss),
            Some((ft, data)) => {
                let m = extract_subnet(net, g)?;
                let m = finetune_head(&m, data, ft.steps, ft.lr, ft.batch_size, ft.seed)?;
                Ok(trainer::evaluate(&m, g, val, batch_size)?.log_loss)
            }
        }
    };
    score().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests;

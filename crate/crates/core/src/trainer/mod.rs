//! Adagrad training with a cosine schedule, evaluation metrics and the
//! training loop shared by the supernet and standalone models.

mod metrics;

pub use metrics::{auc, log_loss, CLAMP};

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureBatch, EMBEDDING_CAP};
use crate::space::Genotype;
use crate::supernet::{all_params, Binding, Model, Network, ParamStore, PathSampler, Region, SamplingStrategy, Supernet};
use crate::tensor::{sigmoid, Gradients, Tape, TensorError};

pub const ADAGRAD_EPS: f64 = 1e-10;

/// Training aborts once the minibatch loss stays above this many times
/// ln 2 for [`DIVERGENCE_STEPS`] consecutive steps.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_STEPS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
}

/// Tracks consecutive steps whose loss exceeds the divergence bound.
#[derive(Debug, Clone, Copy, Default)]
pub struct DivergenceGuard {
    run: usize,
}

impl DivergenceGuard {
    /// Records one minibatch loss; true once training must abort.
    /// A non-finite loss aborts immediately.
    pub fn observe(&mut self, loss: f64) -> bool {
        if !loss.is_finite() {
            return true;
        }
        if loss > DIVERGENCE_FACTOR * std::f64::consts::LN_2 {
            self.run += 1;
        } else {
            self.run = 0;
        }
        self.run >= DIVERGENCE_STEPS
    }
}

/// One Adagrad update of `w` in place.
pub fn adagrad_step(w: &mut [f64], g: &[f64], acc: &mut [f64], lr: f64) {
    for ((w, &g), a) in w.iter_mut().zip(g).zip(acc.iter_mut()) {
        *a += g * g;
        *w -= lr * g / (a.sqrt() + ADAGRAD_EPS);
    }
}

/// Cosine decay from `lr0` at step 0 to 0 at `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let x = step.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Gradient of one binding, dense over its region or row-sparse.
#[derive(Debug, Clone, PartialEq)]
pub enum GradValue {
    Dense(Vec<f64>),
    Rows(BTreeMap<usize, Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub key: String,
    pub region: Region,
    pub grad: GradValue,
}

/// Pulls the gradient of every binding out of a finished backward pass.
pub fn collect_updates(bindings: &[Binding], grads: &Gradients) -> Vec<Update> {
    bindings
        .iter()
        .filter_map(|b| {
            let grad = if let Some(rows) = grads.sparse_rows(b.var) {
                if let Some(d) = grads.dense_raw(b.var) {
                    let mut d = d.to_vec();
                    let width = grads.dense(b.var).shape().last().copied().unwrap_or(1);
                    for (&r, g) in rows {
                        for (x, y) in d[r * width..(r + 1) * width].iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                    GradValue::Dense(d)
                } else {
                    GradValue::Rows(rows.clone())
                }
            } else {
                GradValue::Dense(grads.dense_raw(b.var)?.to_vec())
            };
            Some(Update {
                key: b.key.clone(),
                region: b.region.clone(),
                grad,
            })
        })
        .collect()
}

/// Adagrad accumulators keyed like the parameter store.
#[derive(Debug, Clone, Default)]
pub struct Adagrad {
    acc: HashMap<String, Vec<f64>>,
}

impl Adagrad {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(&mut self, store: &mut ParamStore, updates: &[Update], lr: f64) {
        for u in updates {
            let Some(t) = store.get_mut(&u.key) else { continue };
            let width = t.shape().last().copied().unwrap_or(1).max(1);
            let acc = self.acc.entry(u.key.clone()).or_insert_with(|| vec![0.0; t.len()]);
            let w = t.data_mut();
            let mut upd = |flat: usize, g: f64| {
                acc[flat] += g * g;
                w[flat] -= lr * g / (acc[flat].sqrt() + ADAGRAD_EPS);
            };
            match (&u.region, &u.grad) {
                (Region::Full, GradValue::Dense(g)) => g.iter().enumerate().for_each(|(i, &g)| upd(i, g)),
                (Region::Full, GradValue::Rows(rows)) => {
                    for (&r, g) in rows {
                        g.iter().enumerate().for_each(|(c, &g)| upd(r * width + c, g));
                    }
                }
                (Region::Rows(rows, cols), GradValue::Dense(g)) => {
                    for (ri, r) in rows.iter().enumerate() {
                        for c in 0..*cols {
                            upd(r * width + c, g[ri * cols + c]);
                        }
                    }
                }
                (Region::Prefix(len), GradValue::Dense(g)) => g[..*len].iter().enumerate().for_each(|(i, &g)| upd(i, g)),
                (region, GradValue::Rows(_)) => unreachable!("row-sparse gradient on sliced region {region:?}"),
            }
        }
    }
}

/// One forward/backward/update on `batch`; returns the minibatch loss.
pub fn train_step<N: Network>(
    net: &mut N,
    opt: &mut Adagrad,
    g: &Genotype,
    batch: &FeatureBatch,
    lr: f64,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<f64, TensorError> {
    let (loss, updates) = {
        let mut t = Tape::new();
        let (out, bindings) = net.forward_tape(&mut t, g, batch, trainable)?;
        let loss = t.bce_with_logits(out.logits, &batch.labels)?;
        let value = t.value(loss).data()[0];
        let grads = t.backward(loss)?;
        (value, collect_updates(&bindings, &grads))
    };
    opt.apply(net.params_mut(), &updates, lr);
    Ok(loss)
}

/// `steps` updates at constant `lr` on parameters accepted by `trainable`,
/// cycling through reshuffled passes over `data`. Returns per-step losses.
#[allow(clippy::too_many_arguments)]
pub fn train_steps<N: Network>(
    net: &mut N,
    g: &Genotype,
    data: &Dataset,
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<Vec<f64>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adagrad::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let bs = batch_size.clamp(1, data.len().max(1));
    let mut pos = order.len();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        if pos + bs > order.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let batch = data.batch(&order[pos..pos + bs]);
        pos += bs;
        losses.push(train_step(net, &mut opt, g, &batch, lr, trainable)?);
    }
    Ok(losses)
}

/// Validation log loss and AUC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub log_loss: f64,
    pub auc: f64,
}

/// Click probabilities for every row, evaluated batch-parallel.
pub fn predict<N: Network + Sync>(net: &N, g: &Genotype, data: &Dataset, batch_size: usize) -> Result<Vec<f64>, TensorError> {
    let bs = batch_size.max(1);
    let starts: Vec<usize> = (0..data.len()).step_by(bs).collect();
    let parts: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + bs).min(data.len())).collect();
            let logits = net.logits_for(g, &data.batch(&idx))?;
            Ok(logits.into_iter().map(sigmoid).collect())
        })
        .collect::<Result<_, TensorError>>()?;
    Ok(parts.concat())
}

pub fn evaluate<N: Network + Sync>(net: &N, g: &Genotype, data: &Dataset, batch_size: usize) -> Result<EvalMetrics, TensorError> {
    let p = predict(net, g, data, batch_size)?;
    Ok(EvalMetrics {
        log_loss: log_loss(&p, &data.labels),
        auc: auc(&p, &data.labels),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub epochs: usize,
    pub embedding_cap: usize,
    pub seed: u64,
    /// Train-loss rows are logged every this many steps.
    pub log_every: usize,
    pub eval_batch_size: usize,
    /// Truncates training (the schedule spans the truncated length).
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1024,
            lr0: 0.12,
            epochs: 1,
            embedding_cap: EMBEDDING_CAP,
            seed: 0,
            log_every: 50,
            eval_batch_size: 4096,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), String> {
        if !(self.lr0 > 0.0 && self.lr0 < 1.0) {
            return Err(format!("lr0 must lie in (0, 1), got {}", self.lr0));
        }
        if self.embedding_cap < 1 {
            return Err("embedding_cap must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.log_every == 0 {
            return Err("batch sizes and log_every must be positive".into());
        }
        if self.epochs == 0 {
            return Err("epochs must be positive".into());
        }
        Ok(())
    }

    /// Total optimizer steps for `rows` training rows.
    pub fn total_steps(&self, rows: usize) -> usize {
        let per_epoch = rows.div_ceil(self.batch_size);
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |m| m.min(total))
    }
}

/// One CSV row of the training log. Validation cells are present only on
/// epoch-end rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<MetricRow>,
    pub steps: usize,
    pub final_val: Option<EvalMetrics>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("step,lr,train_loss,val_loss,val_auc\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.step, r.lr, r.train_loss, opt(r.val_loss), opt(r.val_auc)));
        }
        s
    }
}

/// Minibatch training of `net`; `path` chooses the genotype of each step
/// and `eval_g` the genotype validated at epoch ends.
fn run<N: Network + Sync>(
    net: &mut N,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut path: impl FnMut(usize) -> Genotype,
    eval_g: &Genotype,
) -> Result<TrainHistory, TrainError> {
    cfg.check().map_err(TrainError::Config)?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let total = cfg.total_steps(train.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adagrad::new();
    let mut hist = TrainHistory::default();
    let mut window = Vec::with_capacity(cfg.log_every);
    let mut guard = DivergenceGuard::default();
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let g = path(step);
            let lr = cosine_lr(step, total, cfg.lr0);
            let loss = train_step(net, &mut opt, &g, &train.batch(chunk), lr, &all_params)?;
            if guard.observe(loss) {
                return Err(TrainError::Diverged { step, loss });
            }
            window.push(loss);
            step += 1;
            if window.len() == cfg.log_every {
                hist.rows.push(MetricRow {
                    step,
                    lr,
                    train_loss: window.iter().sum::<f64>() / window.len() as f64,
                    val_loss: None,
                    val_auc: None,
                });
                window.clear();
            }
        }
        let m = if val.is_empty() {
            None
        } else {
            Some(evaluate(net, eval_g, val, cfg.eval_batch_size)?)
        };
        let train_loss = if window.is_empty() {
            hist.rows.last().map_or(f64::NAN, |r| r.train_loss)
        } else {
            window.iter().sum::<f64>() / window.len() as f64
        };
        window.clear();
        hist.rows.push(MetricRow {
            step,
            lr: cosine_lr(step, total, cfg.lr0),
            train_loss,
            val_loss: m.map(|m| m.log_loss),
            val_auc: m.map(|m| m.auc),
        });
        hist.final_val = m;
    }
    hist.steps = step;
    Ok(hist)
}

/// One-shot supernet training: a fresh path is sampled for every minibatch.
pub fn train_supernet(
    net: &mut Supernet,
    strategy: SamplingStrategy,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    let total = cfg.total_steps(train.len());
    let sampler = PathSampler::new(strategy, total);
    let space = net.space.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_9a7e);
    let full = Genotype::full(&space);
    run(net, train, val, cfg, |step| sampler.sample(&space, &mut rng, step), &full)
}

/// Standalone training of a fixed architecture.
pub fn train_model(model: &mut Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory, TrainError> {
    let g = model.genotype.clone();
    run(model, train, val, cfg, |_| g.clone(), &g)
}

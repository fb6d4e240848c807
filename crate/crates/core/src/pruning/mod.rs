//! Lottery-ticket pruning with a learned mask and a magnitude baseline.
//!
//! Every prunable weight `W` (m×n) owns a small MLP that produces a soft
//! mask `M = sigmoid(W2 · relu(W1 · W))` with hidden width `h = 2m`. During
//! training the forward pass sees `W ⊙ M ⊙ keep`, where `keep` encodes the
//! hard zeros accumulated so far. After each round the 20% lowest-scored
//! surviving entries are hard-zeroed and the model is retrained from its
//! original initialization.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureBatch};
use crate::supernet::{
    all_params, forward_with, init_tensor, BindMode, Binder, Binding, Init, Model, ParamStore, Region, StoreBinder,
};
use crate::tensor::{Result as TResult, Rows, Tape, Tensor, TensorError, Var};
use crate::trainer::{self, collect_updates, cosine_lr, Adagrad, DivergenceGuard, EvalMetrics, TrainError};

/// Fraction of surviving entries removed per round.
pub const PRUNE_FRACTION: f64 = 0.2;

/// Mask MLP hidden width relative to the weight's row count.
pub const HIDDEN_FACTOR: usize = 2;

/// Soft mask on the tape: `sigmoid(w2 · relu(w1 · w))`.
pub fn gen_mask(t: &mut Tape<'_>, w: Var, w1: Var, w2: Var) -> TResult<Var> {
    let h = t.matmul(w1, w)?;
    let h = t.relu(h);
    let m = t.matmul(w2, h)?;
    Ok(t.sigmoid(m))
}

/// Soft mask values for `w` (m×n) from `w1` (h×m) and `w2` (m×h).
pub fn gen_mask_values(w: &Tensor, w1: &Tensor, w2: &Tensor) -> TResult<Tensor> {
    let (m, h) = (w.shape()[0], w1.shape()[0]);
    if w.rank() != 2 || w1.shape() != [h, m] || w2.shape() != [m, h] {
        return Err(TensorError::Shape {
            op: "gen_mask",
            lhs: w.shape().to_vec(),
            rhs: [w1.shape(), w2.shape()].concat(),
        });
    }
    let mut t = Tape::new();
    let (a, b, c) = (t.frozen(w), t.frozen(w1), t.frozen(w2));
    let v = gen_mask(&mut t, a, b, c)?;
    Ok(t.value(v).clone())
}

/// `w ⊙ m` with the flagged entries forced to zero.
pub fn apply_mask(w: &Tensor, m: &Tensor, hard_zeros: &[bool]) -> TResult<Tensor> {
    if w.shape() != m.shape() || hard_zeros.len() != w.len() {
        return Err(TensorError::Shape {
            op: "apply_mask",
            lhs: w.shape().to_vec(),
            rhs: m.shape().to_vec(),
        });
    }
    let data = w
        .data()
        .iter()
        .zip(m.data())
        .zip(hard_zeros)
        .map(|((&w, &m), &z)| if z { 0.0 } else { w * m })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Weight matrices of the FC, EFC and dot-product operators and of both
/// mergers.
pub fn is_prunable(key: &str) -> bool {
    const OPS: [&str; 7] = ["fc", "efc", "dp.proj", "dp.bal", "dp.out", "d2s", "s2d"];
    let Some(rest) = key.strip_prefix('b') else { return false };
    let Some((_, op)) = rest.split_once('.') else { return false };
    op.strip_suffix(".w").is_some_and(|op| OPS.contains(&op))
}

pub fn prunable_keys(model: &Model) -> Vec<String> {
    model
        .params
        .iter()
        .filter(|(k, t)| is_prunable(k) && t.rank() == 2 && !t.is_empty())
        .map(|(k, _)| k.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Rank by the learned soft mask.
    Mask,
    /// Rank by weight magnitude.
    Magnitude,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Mask => "mask",
            Variant::Magnitude => "magnitude",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    /// Pruning rounds T.
    pub iterations: usize,
    /// Optimizer steps per retraining.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Rank entries across all matrices instead of per matrix.
    pub global: bool,
    pub eval_batch_size: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            iterations: 3,
            steps: 2000,
            batch_size: 1024,
            lr: 0.12,
            seed: 0,
            global: false,
            eval_batch_size: 4096,
        }
    }
}

/// Hard-zero flags per prunable matrix.
pub type ZeroSet = BTreeMap<String, Vec<bool>>;

/// Fraction of prunable entries still alive.
pub fn surviving_fraction(zeros: &ZeroSet) -> f64 {
    let total: usize = zeros.values().map(Vec::len).sum();
    let alive: usize = zeros.values().map(|z| z.iter().filter(|&&z| !z).count()).sum();
    if total == 0 {
        1.0
    } else {
        alive as f64 / total as f64
    }
}

/// Hard-zeroes the `round(fraction · alive)` lowest-scored alive entries of
/// every matrix (or of all matrices jointly when `global`). Ties go to the
/// lower index.
pub fn prune_step(zeros: &mut ZeroSet, scores: &BTreeMap<String, Vec<f64>>, fraction: f64, global: bool) {
    let pick = |cands: &mut Vec<(f64, usize, usize)>, zs: &mut [&mut Vec<bool>]| {
        let k = (cands.len() as f64 * fraction).round() as usize;
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, m, i) in cands.iter().take(k) {
            zs[m][i] = true;
        }
    };
    if global {
        let keys: Vec<String> = zeros.keys().cloned().collect();
        let mut cands = Vec::new();
        for (m, k) in keys.iter().enumerate() {
            for (i, (&z, &s)) in zeros[k].iter().zip(&scores[k]).enumerate() {
                if !z {
                    cands.push((s, m, i));
                }
            }
        }
        let mut zs: Vec<&mut Vec<bool>> = zeros.values_mut().collect();
        pick(&mut cands, &mut zs);
    } else {
        for (k, z) in zeros.iter_mut() {
            let mut cands: Vec<(f64, usize, usize)> = z
                .iter()
                .zip(&scores[k])
                .enumerate()
                .filter(|(_, (&z, _))| !z)
                .map(|(i, (_, &s))| (s, 0, i))
                .collect();
            pick(&mut cands, &mut [z]);
        }
    }
}

/// MACs per sample a weight entry participates in, relative to one MAC per
/// entry.
fn mac_multiplicity(key: &str, dim_s: usize) -> u64 {
    if key.ends_with(".efc.w") || key.ends_with(".dp.bal.w") {
        dim_s as u64
    } else {
        1
    }
}

/// Per-sample FLOPs after crediting fully-zero rows and columns of the
/// pruned matrices; scattered zeros earn no credit.
pub fn structured_flops(model: &Model) -> u64 {
    let mut flops = model.flops();
    for key in prunable_keys(model) {
        let w = model.params.get(&key).expect("prunable key");
        let (m, n) = (w.shape()[0], w.shape()[1]);
        let d = w.data();
        let zr = (0..m).filter(|&r| d[r * n..(r + 1) * n].iter().all(|&v| v == 0.0)).count();
        let zc = (0..n).filter(|&c| (0..m).all(|r| d[r * n + c] == 0.0)).count();
        let removed = (m * n - (m - zr) * (n - zc)) as u64;
        flops -= 2 * removed * mac_multiplicity(&key, model.layout.dim_s);
    }
    flops
}

/// One row of the pruning report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub variant: Variant,
    pub t: usize,
    pub log_loss: f64,
    pub auc: f64,
    pub mflops: f64,
    /// FLOPs relative to the unpruned model, in percent.
    pub flops_percent: f64,
    /// Alive prunable weights, as a fraction.
    pub surviving: f64,
}

pub struct PruneOutcome {
    /// Weights with the final masks folded in.
    pub model: Model,
    /// Rows for `t = 0..=T`; empty when `T = 0`.
    pub rows: Vec<PruneRow>,
    pub zeros: ZeroSet,
}

/// `dataset,variant,T,log_loss,MFLOPs,percent,surviving` CSV.
pub fn report_csv(dataset: &str, rows: &[PruneRow]) -> String {
    let mut s = String::from("dataset,variant,T,log_loss,MFLOPs,percent,surviving\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.2},{:.6}\n",
            dataset,
            r.variant.name(),
            r.t,
            r.log_loss,
            r.mflops,
            r.flops_percent,
            r.surviving
        ));
    }
    s
}

fn keep_tensor(shape: &[usize], zeros: &[bool]) -> Tensor {
    let data = zeros.iter().map(|&z| if z { 0.0 } else { 1.0 }).collect();
    Tensor::new(shape.to_vec(), data).expect("keep shape")
}

/// Binds model weights and wraps the prunable ones in their masks.
struct MaskBinder<'a, 'f> {
    inner: StoreBinder<'a, 'f>,
    mlps: &'a ParamStore,
    keep: &'a BTreeMap<String, Tensor>,
    variant: Variant,
    mask_bindings: Vec<Binding>,
}

impl<'a> MaskBinder<'a, '_> {
    fn mlp_param(&mut self, t: &mut Tape<'a>, key: String) -> TResult<Var> {
        let var = t.param(self.mlps.get(&key)?);
        self.mask_bindings.push(Binding {
            key,
            region: Region::Full,
            var,
        });
        Ok(var)
    }
}

impl<'a> Binder<'a> for MaskBinder<'a, '_> {
    fn weight(&mut self, t: &mut Tape<'a>, key: &str, rows: Rows, cols: usize) -> TResult<Var> {
        let w = self.inner.weight(t, key, rows, cols)?;
        let Some(keep) = self.keep.get(key) else { return Ok(w) };
        let w = match self.variant {
            Variant::Mask => {
                let w1 = self.mlp_param(t, format!("{key}.mask.w1"))?;
                let w2 = self.mlp_param(t, format!("{key}.mask.w2"))?;
                let m = gen_mask(t, w, w1, w2)?;
                t.mul(w, m)?
            }
            Variant::Magnitude => w,
        };
        let k = t.frozen(keep);
        t.mul(w, k)
    }

    fn vector(&mut self, t: &mut Tape<'a>, key: &str, len: usize, init: Init) -> TResult<Var> {
        self.inner.vector(t, key, len, init)
    }

    fn table(&mut self, t: &mut Tape<'a>, key: &str, rows: usize, cols: usize) -> TResult<Var> {
        self.inner.table(t, key, rows, cols)
    }
}

/// Fresh mask MLPs for every prunable matrix. Both factors use the trailing
/// extent as fan-in.
fn init_mlps(model: &Model, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    for key in prunable_keys(model) {
        let m = model.params.get(&key).expect("prunable key").shape()[0];
        let h = HIDDEN_FACTOR * m;
        let w1 = format!("{key}.mask.w1");
        let w2 = format!("{key}.mask.w2");
        s.insert(w1.clone(), init_tensor(seed, &w1, &[h, m], Init::Table));
        s.insert(w2.clone(), init_tensor(seed, &w2, &[m, h], Init::Table));
    }
    s
}

struct Round {
    model: Model,
    mlps: ParamStore,
}

/// Trains `init` from its own weights under the current zero set.
fn train_round(init: &Model, zeros: &ZeroSet, variant: Variant, data: &Dataset, cfg: &PruneConfig) -> Result<Round, TrainError> {
    let mut model = init.clone();
    let mut mlps = init_mlps(init, cfg.seed);
    let keep: BTreeMap<String, Tensor> = zeros
        .iter()
        .map(|(k, z)| (k.clone(), keep_tensor(init.params.get(k).expect("prunable").shape(), z)))
        .collect();
    let g = model.genotype.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut opt, mut opt_mask) = (Adagrad::new(), Adagrad::new());
    let mut guard = DivergenceGuard::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let bs = cfg.batch_size.clamp(1, data.len().max(1));
    let mut pos = order.len();
    for step in 0..cfg.steps {
        if pos + bs > order.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let batch: FeatureBatch = data.batch(&order[pos..pos + bs]);
        pos += bs;
        let lr = cosine_lr(step, cfg.steps, cfg.lr);
        let (loss, updates, mask_updates) = {
            let mut t = Tape::new();
            let mut b = MaskBinder {
                inner: StoreBinder::new(&model.params, BindMode::Compact, &all_params),
                mlps: &mlps,
                keep: &keep,
                variant,
                mask_bindings: Vec::new(),
            };
            let out = forward_with(&mut t, &mut b, &model.layout, &g, &batch)?;
            let loss = t.bce_with_logits(out.logits, &batch.labels)?;
            let value = t.value(loss).data()[0];
            let grads = t.backward(loss)?;
            (value, collect_updates(&b.inner.bindings, &grads), collect_updates(&b.mask_bindings, &grads))
        };
        if guard.observe(loss) {
            return Err(TrainError::Diverged { step, loss });
        }
        opt.apply(&mut model.params, &updates, lr);
        opt_mask.apply(&mut mlps, &mask_updates, lr);
    }
    Ok(Round { model, mlps })
}

/// Soft-mask values (or magnitudes) of every prunable matrix.
fn scores(round: &Round, zeros: &ZeroSet, variant: Variant) -> TResult<BTreeMap<String, Vec<f64>>> {
    zeros
        .keys()
        .map(|k| {
            let w = round.model.params.get(k)?;
            let s = match variant {
                Variant::Mask => {
                    let m = gen_mask_values(
                        w,
                        round.mlps.get(&format!("{k}.mask.w1"))?,
                        round.mlps.get(&format!("{k}.mask.w2"))?,
                    )?;
                    m.into_data()
                }
                Variant::Magnitude => w.data().iter().map(|v| v.abs()).collect(),
            };
            Ok((k.clone(), s))
        })
        .collect()
}

/// The trained model with masks and hard zeros multiplied into its weights.
fn folded(round: &Round, zeros: &ZeroSet, variant: Variant) -> TResult<Model> {
    let mut m = round.model.clone();
    for (k, z) in zeros {
        let w = round.model.params.get(k)?;
        let mask = match variant {
            Variant::Mask => gen_mask_values(
                w,
                round.mlps.get(&format!("{k}.mask.w1"))?,
                round.mlps.get(&format!("{k}.mask.w2"))?,
            )?,
            Variant::Magnitude => Tensor::full(w.shape(), 1.0),
        };
        m.params.insert(k.clone(), apply_mask(w, &mask, z)?);
    }
    Ok(m)
}

/// Iterative pruning of `init` (the original initialization of the chosen
/// architecture). Row `t` reports the model retrained after `t` rounds.
pub fn prune(init: &Model, train: &Dataset, val: &Dataset, variant: Variant, cfg: &PruneConfig) -> Result<PruneOutcome, TrainError> {
    let mut zeros: ZeroSet = prunable_keys(init)
        .into_iter()
        .map(|k| {
            let n = init.params.get(&k).expect("prunable").len();
            (k, vec![false; n])
        })
        .collect();
    if cfg.iterations == 0 {
        return Ok(PruneOutcome {
            model: init.clone(),
            rows: Vec::new(),
            zeros,
        });
    }
    let base_flops = init.flops() as f64;
    let mut rows = Vec::with_capacity(cfg.iterations + 1);
    let mut last = None;
    for t in 0..=cfg.iterations {
        let round = train_round(init, &zeros, variant, train, cfg)?;
        let model = folded(&round, &zeros, variant)?;
        let EvalMetrics { log_loss, auc } = trainer::evaluate(&model, &model.genotype, val, cfg.eval_batch_size)?;
        let flops = structured_flops(&model) as f64;
        rows.push(PruneRow {
            variant,
            t,
            log_loss,
            auc,
            mflops: flops / 1e6,
            flops_percent: 100.0 * flops / base_flops,
            surviving: surviving_fraction(&zeros),
        });
        if t < cfg.iterations {
            let s = scores(&round, &zeros, variant)?;
            prune_step(&mut zeros, &s, PRUNE_FRACTION, cfg.global);
        }
        last = Some(model);
    }
    Ok(PruneOutcome {
        model: last.expect("at least one round"),
        rows,
        zeros,
    })
}

/// Mask-based iterative pruning.
pub fn iterate_prune(init: &Model, train: &Dataset, val: &Dataset, cfg: &PruneConfig) -> Result<PruneOutcome, TrainError> {
    prune(init, train, val, Variant::Mask, cfg)
}

/// Magnitude-based pruning on the same schedule.
pub fn magnitude_prune(init: &Model, train: &Dataset, val: &Dataset, cfg: &PruneConfig) -> Result<PruneOutcome, TrainError> {
    prune(init, train, val, Variant::Magnitude, cfg)
}

#[cfg(test)]
mod tests;

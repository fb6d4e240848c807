//! Ranking fidelity of supernet scores against from-scratch training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::evolution::{retrain_from_scratch, supernet_fitness, FinetuneConfig};
use crate::space::Genotype;
use crate::supernet::{sample_strategy, SamplingStrategy, Supernet};
use crate::trainer::{TrainConfig, TrainError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RankError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("need at least two observations")]
    TooShort,
    #[error("correlation undefined: an input is constant")]
    Undefined,
}

fn check(a: &[f64], b: &[f64]) -> Result<(), RankError> {
    if a.len() != b.len() {
        return Err(RankError::Length(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(RankError::TooShort);
    }
    Ok(())
}

/// Pairs tied within each run of equal keys.
fn tied_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Stable merge sort returning the number of inversions.
fn sort_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_count(&mut v[..mid], buf) + sort_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall's tau-b in O(n log n).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64, RankError> {
    check(a, b)?;
    let n = a.len() as u64;
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let sa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
    let mut sb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let ties_a = tied_pairs(&sa);
    // Pairs tied in both a and b.
    let mut joint = 0u64;
    let mut run = 1u64;
    for k in 1..idx.len() {
        if sa[k] == sa[k - 1] && sb[k] == sb[k - 1] {
            run += 1;
        } else {
            joint += run * (run - 1) / 2;
            run = 1;
        }
    }
    joint += run * (run - 1) / 2;
    let mut buf = Vec::with_capacity(sb.len());
    let swaps = sort_count(&mut sb, &mut buf);
    let ties_b = tied_pairs(&sb);
    let n0 = n * (n - 1) / 2;
    let denom = ((n0 - ties_a) as f64 * (n0 - ties_b) as f64).sqrt();
    if denom == 0.0 {
        return Err(RankError::Undefined);
    }
    let num = n0 as i64 - ties_a as i64 - ties_b as i64 + joint as i64 - 2 * swaps as i64;
    Ok(num as f64 / denom)
}

/// Pearson's correlation coefficient.
pub fn pearson_rho(a: &[f64], b: &[f64]) -> Result<f64, RankError> {
    check(a, b)?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(RankError::Undefined);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Which axis the top-fraction filter ranks by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterBy {
    /// From-scratch loss.
    GroundTruth,
    /// Supernet score.
    Supernet,
}

/// Correlations between supernet scores and from-scratch losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub n: usize,
    pub tau: Option<f64>,
    pub rho: Option<f64>,
    /// (supernet score, from-scratch loss) per sampled subnet.
    pub pairs: Vec<(f64, f64)>,
    pub top_fraction: Option<f64>,
    pub filter_by: FilterBy,
    pub top_n: usize,
    pub top_tau: Option<f64>,
    pub top_rho: Option<f64>,
    pub finetune: bool,
    /// Human-readable description of the from-scratch training budget.
    pub budget: String,
}

/// Builds a report from score pairs. Undefined correlations (constant
/// inputs, fewer than two points) are reported as `None`.
pub fn rank_report(pairs: Vec<(f64, f64)>, top_fraction: Option<f64>, filter_by: FilterBy) -> RankReport {
    let corr = |p: &[(f64, f64)]| {
        let a: Vec<f64> = p.iter().map(|x| x.0).collect();
        let b: Vec<f64> = p.iter().map(|x| x.1).collect();
        (kendall_tau(&a, &b).ok(), pearson_rho(&a, &b).ok())
    };
    let (tau, rho) = corr(&pairs);
    let mut top = pairs.clone();
    if let Some(f) = top_fraction {
        top.sort_by(|x, y| match filter_by {
            FilterBy::GroundTruth => x.1.total_cmp(&y.1),
            FilterBy::Supernet => x.0.total_cmp(&y.0),
        });
        let keep = ((top.len() as f64 * f).round() as usize).clamp(0, top.len());
        top.truncate(keep);
    }
    let (top_tau, top_rho) = corr(&top);
    RankReport {
        n: pairs.len(),
        tau,
        rho,
        pairs,
        top_fraction,
        filter_by,
        top_n: top.len(),
        top_tau,
        top_rho,
        finetune: false,
        budget: String::new(),
    }
}

/// Sorted losses as `rank,log_loss,cum_fraction` CSV.
pub fn cdf_csv(losses: &[f64]) -> String {
    let mut v = losses.to_vec();
    v.sort_by(f64::total_cmp);
    let mut s = String::from("rank,log_loss,cum_fraction\n");
    for (i, x) in v.iter().enumerate() {
        s.push_str(&format!("{},{},{}\n", i + 1, x, (i + 1) as f64 / v.len() as f64));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankConfig {
    pub n_subnets: usize,
    pub finetune: bool,
    pub finetune_cfg: FinetuneConfig,
    /// Optimizer steps of each from-scratch proxy run.
    pub scratch_steps: usize,
    pub scratch: TrainConfig,
    pub top_fraction: Option<f64>,
    pub filter_by: FilterBy,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            n_subnets: 100,
            finetune: false,
            finetune_cfg: FinetuneConfig::default(),
            scratch_steps: 2000,
            scratch: TrainConfig::default(),
            top_fraction: Some(0.5),
            filter_by: FilterBy::GroundTruth,
            eval_batch_size: 4096,
            seed: 0,
        }
    }
}

/// Subnets scored by the supernet and by brief from-scratch training.
pub struct RankOutcome {
    pub report: RankReport,
    pub genotypes: Vec<Genotype>,
    pub cdf: String,
}

/// Samples `n_subnets` paths (single operator, any connection, no warm-up),
/// scores each on `val` through the supernet and again after training it
/// from scratch on `train`.
pub fn rank_experiment(net: &Supernet, train: &Dataset, val: &Dataset, cfg: &RankConfig) -> Result<RankOutcome, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gs: Vec<Genotype> = (0..cfg.n_subnets)
        .map(|_| sample_strategy(SamplingStrategy::SingleOpAnyConn, &net.space, &mut rng))
        .collect();
    let ft = cfg.finetune.then_some((&cfg.finetune_cfg, train));
    let scores: Vec<f64> = gs
        .par_iter()
        .map(|g| supernet_fitness(net, g, val, cfg.eval_batch_size, ft))
        .collect();
    let scratch = TrainConfig {
        max_steps: Some(cfg.scratch_steps),
        epochs: cfg.scratch_steps.div_ceil(train.len().div_ceil(cfg.scratch.batch_size).max(1)).max(1),
        ..cfg.scratch.clone()
    };
    let truth: Vec<f64> = gs
        .par_iter()
        .map(|g| retrain_from_scratch(&net.space, train, val, g, &scratch).map(|(_, m)| m.log_loss))
        .collect::<Result<_, _>>()?;
    let mut report = rank_report(scores.into_iter().zip(truth.iter().copied()).collect(), cfg.top_fraction, cfg.filter_by);
    report.finetune = cfg.finetune;
    report.budget = format!(
        "{} steps at batch {} (lr {}) per subnet",
        scratch.total_steps(train.len()),
        scratch.batch_size,
        scratch.lr0
    );
    Ok(RankOutcome {
        report,
        genotypes: gs,
        cdf: cdf_csv(&truth),
    })
}

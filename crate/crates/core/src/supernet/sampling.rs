use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::space::{BlockGene, DenseOp, Genotype, HeadGene, OpChoice, SpaceConfig, SparseOp, RAW};

/// How a training path is drawn from the supernet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingStrategy {
    /// One dense operator, one sparse operator and one connection per block.
    SingleOpSingleConn,
    /// Nonempty uniform subsets of operators and connections.
    AnyOpAnyConn,
    /// One dense and one sparse operator, any nonempty connection subset.
    SingleOpAnyConn,
}

/// Path sampler with a linearly decaying warm-up towards the full supernet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSampler {
    pub strategy: SamplingStrategy,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl PathSampler {
    pub fn new(strategy: SamplingStrategy, total_steps: usize) -> Self {
        PathSampler {
            strategy,
            warmup_fraction: 0.2,
            total_steps,
        }
    }

    /// Probability of drawing the full supernet at `step`:
    /// `max(0, 1 - step / (warmup_fraction · total_steps))`.
    pub fn warmup_prob(&self, step: usize) -> f64 {
        let span = self.warmup_fraction * self.total_steps as f64;
        if span <= 0.0 {
            return 0.0;
        }
        (1.0 - step as f64 / span).max(0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, cfg: &SpaceConfig, rng: &mut R, step: usize) -> Genotype {
        let p = self.warmup_prob(step);
        if p > 0.0 && rng.random_bool(p.min(1.0)) {
            return Genotype::full(cfg);
        }
        sample_strategy(self.strategy, cfg, rng)
    }
}

fn pick<T: Copy, R: Rng + ?Sized>(items: &[T], rng: &mut R) -> T {
    items[rng.random_range(0..items.len())]
}

fn subset<T: Copy, R: Rng + ?Sized>(items: &[T], rng: &mut R) -> Vec<T> {
    loop {
        let s: Vec<T> = items.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
        if !s.is_empty() {
            return s;
        }
    }
}

/// Draws a path without warm-up.
pub fn sample_strategy<R: Rng + ?Sized>(strategy: SamplingStrategy, cfg: &SpaceConfig, rng: &mut R) -> Genotype {
    let single_op = strategy != SamplingStrategy::AnyOpAnyConn;
    let single_conn = strategy == SamplingStrategy::SingleOpSingleConn;
    let bits = |rng: &mut R| pick(&cfg.weight_bits_choices, rng);
    let blocks = (1..=cfg.num_blocks)
        .map(|n| {
            let sources: Vec<usize> = (RAW..n).collect();
            let connections = if single_conn {
                [pick(&sources, rng)].into()
            } else {
                subset(&sources, rng).into_iter().collect()
            };
            let dense_ops = if single_op {
                vec![pick(&cfg.dense_ops, rng)]
            } else {
                subset(&cfg.dense_ops, rng)
            };
            let dense: BTreeMap<DenseOp, OpChoice> = dense_ops
                .into_iter()
                .map(|op| {
                    let dim = pick(&cfg.dense_dims, rng);
                    (op, OpChoice { dim, bits: bits(rng) })
                })
                .collect();
            let sparse_ops = if single_op {
                vec![pick(&cfg.sparse_ops, rng)]
            } else {
                subset(&cfg.sparse_ops, rng)
            };
            let sparse: BTreeMap<SparseOp, OpChoice> = sparse_ops
                .into_iter()
                .map(|op| {
                    let dim = pick(&cfg.sparse_dims, rng);
                    (op, OpChoice { dim, bits: bits(rng) })
                })
                .collect();
            let (d2s, s2d) = if cfg.allow_mergers {
                (rng.random_bool(0.5), rng.random_bool(0.5))
            } else {
                (false, false)
            };
            BlockGene {
                connections,
                dense,
                sparse,
                d2s,
                s2d,
            }
        })
        .collect();
    Genotype {
        blocks,
        head: HeadGene { bits: bits(rng) },
    }
}

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;

use super::{BlockGene, DenseOp, Genotype, HeadGene, OpChoice, SpaceConfig, SparseOp, RAW};

/// Uniform over the nonempty subsets of `items`.
pub(crate) fn nonempty_subset<T: Copy, R: Rng + ?Sized>(items: &[T], rng: &mut R) -> Vec<T> {
    assert!(!items.is_empty());
    loop {
        let pick: Vec<T> = items.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
        if !pick.is_empty() {
            return pick;
        }
    }
}

pub(crate) fn choose<T: Copy, R: Rng + ?Sized>(items: &[T], rng: &mut R) -> T {
    *items.choose(rng).expect("nonempty choice list")
}

pub(crate) fn dense_choice<R: Rng + ?Sized>(cfg: &SpaceConfig, rng: &mut R) -> OpChoice {
    OpChoice {
        dim: choose(&cfg.dense_dims, rng),
        bits: choose(&cfg.weight_bits_choices, rng),
    }
}

pub(crate) fn sparse_choice<R: Rng + ?Sized>(cfg: &SpaceConfig, rng: &mut R) -> OpChoice {
    OpChoice {
        dim: choose(&cfg.sparse_dims, rng),
        bits: choose(&cfg.weight_bits_choices, rng),
    }
}

pub(crate) fn random_connections<R: Rng + ?Sized>(block: usize, rng: &mut R) -> BTreeSet<usize> {
    if block == 1 {
        return [RAW].into();
    }
    let sources: Vec<usize> = (0..block).collect();
    nonempty_subset(&sources, rng).into_iter().collect()
}

pub(crate) fn random_mergers<R: Rng + ?Sized>(cfg: &SpaceConfig, rng: &mut R) -> (bool, bool) {
    if cfg.allow_mergers {
        (rng.random_bool(0.5), rng.random_bool(0.5))
    } else {
        (false, false)
    }
}

/// Uniformly random valid genotype: nonempty connection and operator
/// subsets, independent uniform dims, bits and merger flags.
pub fn random_genotype<R: Rng + ?Sized>(cfg: &SpaceConfig, rng: &mut R) -> Genotype {
    let blocks = (1..=cfg.num_blocks)
        .map(|n| {
            let connections = random_connections(n, rng);
            let dense: BTreeMap<DenseOp, OpChoice> = nonempty_subset(&cfg.dense_ops, rng)
                .into_iter()
                .map(|op| (op, dense_choice(cfg, rng)))
                .collect();
            let sparse: BTreeMap<SparseOp, OpChoice> = nonempty_subset(&cfg.sparse_ops, rng)
                .into_iter()
                .map(|op| (op, sparse_choice(cfg, rng)))
                .collect();
            let (d2s, s2d) = random_mergers(cfg, rng);
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
        head: HeadGene {
            bits: choose(&cfg.weight_bits_choices, rng),
        },
    }
}

/// The six single-block mutation actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MutationAction {
    DenseDim,
    SparseDim,
    DenseOp,
    SparseOp,
    Connections,
    Mergers,
}

impl MutationAction {
    pub const ALL: [MutationAction; 6] = [
        MutationAction::DenseDim,
        MutationAction::SparseDim,
        MutationAction::DenseOp,
        MutationAction::SparseOp,
        MutationAction::Connections,
        MutationAction::Mergers,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mutation {
    /// 1-based block index.
    pub block: usize,
    pub action: MutationAction,
}

pub fn mutate<R: Rng + ?Sized>(g: &Genotype, cfg: &SpaceConfig, rng: &mut R) -> Genotype {
    mutate_traced(g, cfg, rng).0
}

/// Re-samples one operator slot: an absent operator is added, a present one
/// is removed, and the only operator of a branch is swapped for another.
fn resample_op<K: Ord + Copy, R: Rng + ?Sized>(
    selected: &mut BTreeMap<K, OpChoice>,
    ops: &[K],
    fresh: impl Fn(&mut R) -> OpChoice,
    rng: &mut R,
) {
    let op = choose(ops, rng);
    if !selected.contains_key(&op) {
        let c = fresh(rng);
        selected.insert(op, c);
    } else if selected.len() > 1 {
        selected.remove(&op);
    } else {
        let others: Vec<K> = ops.iter().copied().filter(|o| *o != op).collect();
        if let Some(&new) = others.choose(rng) {
            selected.remove(&op);
            let c = fresh(rng);
            selected.insert(new, c);
        }
    }
}

/// Applies one uniformly chosen action to one uniformly chosen block and
/// reports what was done.
pub fn mutate_traced<R: Rng + ?Sized>(g: &Genotype, cfg: &SpaceConfig, rng: &mut R) -> (Genotype, Mutation) {
    let mut child = g.clone();
    let block = rng.random_range(1..=child.blocks.len());
    let action = choose(&MutationAction::ALL, rng);
    let b = &mut child.blocks[block - 1];
    match action {
        MutationAction::DenseDim => {
            let ops: Vec<DenseOp> = b.dense.keys().copied().collect();
            let op = choose(&ops, rng);
            b.dense.insert(op, dense_choice(cfg, rng));
        }
        MutationAction::SparseDim => {
            let ops: Vec<SparseOp> = b.sparse.keys().copied().collect();
            let op = choose(&ops, rng);
            b.sparse.insert(op, sparse_choice(cfg, rng));
        }
        MutationAction::DenseOp => resample_op(&mut b.dense, &cfg.dense_ops, |r| dense_choice(cfg, r), rng),
        MutationAction::SparseOp => resample_op(&mut b.sparse, &cfg.sparse_ops, |r| sparse_choice(cfg, r), rng),
        MutationAction::Connections => b.connections = random_connections(block, rng),
        MutationAction::Mergers => (b.d2s, b.s2d) = random_mergers(cfg, rng),
    }
    (child, Mutation { block, action })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg3() -> SpaceConfig {
        SpaceConfig {
            num_blocks: 3,
            ..SpaceConfig::full()
        }
    }

    #[test]
    fn random_genotype_is_reproducible() {
        let cfg = SpaceConfig::full();
        let a = random_genotype(&cfg, &mut ChaCha8Rng::seed_from_u64(42));
        let b = random_genotype(&cfg, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn random_genotypes_validate() {
        let cfg = SpaceConfig::full();
        for seed in 0..10_000 {
            let g = random_genotype(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            g.validate(&cfg).unwrap();
        }
    }

    #[test]
    fn connection_frequencies_match_nonempty_subset_law() {
        // Uniform over nonempty subsets of n sources selects each source with
        // probability 2^(n-1) / (2^n - 1).
        let cfg = cfg3();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 10_000;
        let mut counts = [[0usize; 3]; 4];
        for _ in 0..trials {
            let g = random_genotype(&cfg, &mut rng);
            for n in 1..=3 {
                for &s in &g.block(n).connections {
                    counts[n][s] += 1;
                }
            }
        }
        for n in 2..=3usize {
            let exact = f64::from(1u32 << (n - 1)) / f64::from((1u32 << n) - 1);
            for s in 0..n {
                let freq = counts[n][s] as f64 / trials as f64;
                assert!((freq - exact).abs() < 0.02, "block {n} source {s}: {freq} vs {exact}");
            }
        }
        assert_eq!(counts[1][0], trials);
    }

    #[test]
    fn mutation_preserves_validity_and_is_deterministic() {
        let cfg = SpaceConfig::full();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = random_genotype(&cfg, &mut rng);
        for seed in 0..10_000u64 {
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let (c1, m1) = mutate_traced(&g, &cfg, &mut r1);
            let (c2, m2) = mutate_traced(&g, &cfg, &mut r2);
            assert_eq!((c1.clone(), m1), (c2, m2));
            c1.validate(&cfg).unwrap();
            g = c1;
        }
    }

    #[test]
    fn mutation_actions_are_uniform() {
        let cfg = cfg3();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_genotype(&cfg, &mut rng);
        let mut hist = std::collections::HashMap::new();
        let trials = 10_000;
        for _ in 0..trials {
            let (_, m) = mutate_traced(&g, &cfg, &mut rng);
            *hist.entry(m.action).or_insert(0usize) += 1;
        }
        for a in MutationAction::ALL {
            let f = hist[&a] as f64 / trials as f64;
            assert!((f - 1.0 / 6.0).abs() < 0.02, "{a:?}: {f}");
        }
    }

    #[test]
    fn connection_resample_on_first_block_is_forced_raw() {
        let cfg = cfg3();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_genotype(&cfg, &mut rng);
        let mut hits = 0;
        for _ in 0..2000 {
            let (c, m) = mutate_traced(&g, &cfg, &mut rng);
            if m.block == 1 && m.action == MutationAction::Connections {
                hits += 1;
                assert_eq!(c, g);
            }
        }
        assert!(hits > 0);
    }
}

use num_bigint::BigUint;

use super::SpaceConfig;

/// Number of (dense subset × sparse subset) operator selections available
/// to a single block, both subsets nonempty.
pub fn operator_subset_count(cfg: &SpaceConfig) -> u64 {
    ((1u64 << cfg.dense_ops.len()) - 1) * ((1u64 << cfg.sparse_ops.len()) - 1)
}

/// Number of distinct genotypes in the space.
///
/// Counting convention: each operator is either absent or present with one
/// of the branch's dims (`(1 + |dims|)^|ops| − 1` nonempty branch
/// configurations); the two merger flags contribute a factor of 4 when
/// enabled; block `n` chooses a nonempty subset of its `n` sources.
/// Weight bits are excluded.
pub fn space_cardinality(cfg: &SpaceConfig) -> BigUint {
    let branch = |ops: usize, dims: usize| BigUint::from(1 + dims).pow(ops as u32) - 1u32;
    let per_block_ops = branch(cfg.dense_ops.len(), cfg.dense_dims.len())
        * branch(cfg.sparse_ops.len(), cfg.sparse_dims.len())
        * BigUint::from(if cfg.allow_mergers { 4u32 } else { 1 });
    let mut total = BigUint::from(1u32);
    for n in 1..=cfg.num_blocks {
        let conns = (BigUint::from(1u32) << n) - 1u32;
        total *= &per_block_ops * conns;
    }
    total
}

//! Weight-sharing neural architecture search for click-through-rate
//! models: a minimal f64 autodiff engine, the block-wise search space and
//! its operators, a supernet with path sampling, regularized evolution,
//! ranking metrics, lottery-ticket pruning and a ReRAM crossbar cost model.

pub mod data;
pub mod evolution;
pub mod ops;
pub mod pim;
pub mod pruning;
pub mod ranking;
pub mod space;
pub mod supernet;
pub mod tensor;
pub mod trainer;

pub use data::{split, synth_generate, Dataset, FeatureBatch, FeatureSpec, Split, SynthConfig};
pub use evolution::{evolve, EvolutionConfig, SearchRecord};
pub use ops::{OpKind, OpSpec, ParamCount};
pub use pim::{CostReport, HwConfig, QuantSpec};
pub use pruning::{PruneConfig, Variant};
pub use ranking::{kendall_tau, pearson_rho, RankConfig, RankReport};
pub use space::{DenseOp, Genotype, SpaceConfig, SparseOp};
pub use supernet::{extract_subnet, Model, SamplingStrategy, Supernet};
pub use tensor::{Tape, Tensor, TensorError, Var};
pub use trainer::{EvalMetrics, TrainConfig, TrainHistory};

//! Run configuration: one JSON document with a section per stage.

use std::path::Path;

use nasforge_core::evolution::{FinetuneConfig, LR_GRID};
use nasforge_core::pim::CosearchConfig;
use nasforge_core::{
    EvolutionConfig, FeatureSpec, HwConfig, PruneConfig, RankConfig, SamplingStrategy, SpaceConfig, SynthConfig,
    TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Synthetic data shape. Every sparse field shares one vocabulary size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub rows: usize,
    pub dense: usize,
    pub sparse: usize,
    pub vocab: usize,
    pub score_std: f64,
    pub interaction_share: f64,
    pub factor_dim: usize,
    pub zipf: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        DataConfig {
            rows: 100_000,
            dense: 13,
            sparse: 26,
            vocab: 100,
            score_std: s.score_std,
            interaction_share: s.interaction_share,
            factor_dim: s.factor_dim,
            zipf: s.zipf,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn spec(&self) -> FeatureSpec {
        FeatureSpec::new(self.dense, self.sparse, self.vocab)
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            rows: self.rows,
            spec: self.spec(),
            seed: self.seed,
            score_std: self.score_std,
            interaction_share: self.interaction_share,
            factor_dim: self.factor_dim,
            zipf: self.zipf,
            zero_teacher: false,
        }
    }
}

/// How candidates are scored during evolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Validation rows used for fitness; `None` uses all of them.
    pub eval_rows: Option<usize>,
    pub eval_batch_size: usize,
    pub finetune: Option<FinetuneConfig>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            eval_rows: None,
            eval_batch_size: 4096,
            finetune: None,
        }
    }
}

/// Retraining of the best searched architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectConfig {
    pub top_k: usize,
    pub lrs: Vec<f64>,
    pub train: TrainConfig,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            top_k: 15,
            lrs: LR_GRID.to_vec(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub space: SpaceConfig,
    pub sampling: SamplingStrategy,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub evolution: EvolutionConfig,
    pub select: SelectConfig,
    pub ranking: RankConfig,
    pub pruning: PruneConfig,
    pub hw: HwConfig,
    pub cosim: CosearchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            space: SpaceConfig::full(),
            sampling: SamplingStrategy::SingleOpAnyConn,
            train: TrainConfig::default(),
            search: SearchConfig::default(),
            evolution: EvolutionConfig::default(),
            select: SelectConfig::default(),
            ranking: RankConfig::default(),
            pruning: PruneConfig::default(),
            hw: HwConfig::default(),
            cosim: CosearchConfig::default(),
        }
    }
}

/// SplitMix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stage seeds.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Data = 1,
    Split,
    Train,
    Evolution,
    Select,
    Ranking,
    Pruning,
    Cosim,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn stage_seed(&self, s: Stage) -> u64 {
        splitmix(self.seed ^ splitmix(s as u64))
    }

    /// Overwrites every section seed with one derived from the master seed.
    pub fn derive_seeds(&mut self) {
        self.data.seed = self.stage_seed(Stage::Data);
        self.train.seed = self.stage_seed(Stage::Train);
        self.evolution.seed = self.stage_seed(Stage::Evolution);
        self.select.train.seed = self.stage_seed(Stage::Select);
        self.ranking.seed = self.stage_seed(Stage::Ranking);
        self.ranking.scratch.seed = self.stage_seed(Stage::Ranking);
        self.pruning.seed = self.stage_seed(Stage::Pruning);
        self.cosim.evolution.seed = self.stage_seed(Stage::Cosim);
    }

    pub fn check(&self) -> Result<(), CliError> {
        let v = |r: Result<(), String>, what: &str| r.map_err(|e| CliError::Validation(format!("{what}: {e}")));
        v(self.space.check(), "space")?;
        v(self.data.spec().check(), "data")?;
        v(self.train.check(), "train")?;
        v(self.select.train.check(), "select.train")?;
        v(self.evolution.check(), "evolution")?;
        v(self.cosim.evolution.check(), "cosim.evolution")?;
        self.hw.check().map_err(|e| CliError::Validation(e.to_string()))?;
        if self.data.rows < 10 {
            return Err(CliError::Validation("data.rows must be at least 10".into()));
        }
        if self.select.top_k == 0 || self.select.lrs.is_empty() {
            return Err(CliError::Validation("select needs top_k >= 1 and a learning rate".into()));
        }
        Ok(())
    }
}

/// Named search-space presets.
pub fn space_preset(name: &str) -> Result<SpaceConfig, CliError> {
    match name {
        "full" => Ok(SpaceConfig::full()),
        "small" => Ok(SpaceConfig::small()),
        "codesign" => Ok(SpaceConfig::codesign()),
        "desk" => Ok(desk_space()),
        _ => Err(CliError::Validation(format!(
            "unknown space preset {name:?} (full, small, codesign, desk)"
        ))),
    }
}

/// Three blocks with narrow widths; trains in seconds per epoch.
pub fn desk_space() -> SpaceConfig {
    SpaceConfig {
        num_blocks: 3,
        dense_dims: vec![16, 32, 64],
        sparse_dims: vec![8, 16],
        dim_s: 8,
        ..SpaceConfig::full()
    }
}

//! Weight-sharing supernet over the choice-block space.
//!
//! Every parameter is allocated once at its maximal shape. A genotype is
//! evaluated by binding, for each selected operator, the weight rows that
//! correspond to the global positions of its inputs and the leading columns
//! for its sampled width. Unselected widths never enter the computation,
//! which is equivalent to zero-masking them. [`extract_subnet`] copies
//! exactly those slices into a standalone [`Model`] that runs the same
//! forward code on compact weights.

mod checkpoint;
mod forward;
mod layout;
mod params;
mod sampling;

pub use checkpoint::{load_params, save_params, CheckpointError};
pub use forward::{BlockOut, ForwardOut};
pub use layout::{BlockPlan, Layout, Plan};
pub use params::{init_tensor, BindMode, Binder, Binding, Init, InitBinder, ParamStore, RecordingBinder, Region, StoreBinder};
pub use sampling::{sample_strategy, PathSampler, SamplingStrategy};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureBatch, FeatureSpec};
use crate::ops::{self, ParamCount, D2S_EMBEDDINGS};
use crate::space::{DenseOp, Genotype, SpaceConfig, SparseOp, Violation};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum SupernetError {
    #[error("invalid space: {0}")]
    Space(String),
    #[error("invalid feature spec: {0}")]
    Features(String),
    #[error("invalid genotype: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Genotype(Vec<Violation>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
}

pub type Result<T> = std::result::Result<T, SupernetError>;

/// Accepts every parameter key.
pub fn all_params(_: &str) -> bool {
    true
}

/// Accepts no parameter key (evaluation).
pub fn no_params(_: &str) -> bool {
    false
}

/// Accepts the logit head only.
pub fn head_params(key: &str) -> bool {
    key.starts_with("head.")
}

/// Embedding tables are excluded from operator parameter counts.
pub fn is_embedding(key: &str) -> bool {
    key == "emb"
}

/// A genotype together with the blocks that reach the head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrunedGenotype {
    pub genotype: Genotype,
    /// `used[n]` for blocks `1..=N`; index 0 unused.
    pub used: Vec<bool>,
}

impl PrunedGenotype {
    /// Blocks `1..=N` whose output never reaches the head.
    pub fn unused_blocks(&self) -> Vec<usize> {
        (1..self.used.len()).filter(|&n| !self.used[n]).collect()
    }
}

/// Marks blocks whose outputs never reach the head; accounting and
/// evaluation skip them.
pub fn prune_unreachable(g: &Genotype) -> PrunedGenotype {
    PrunedGenotype {
        genotype: g.clone(),
        used: g.used_blocks(),
    }
}

/// Per-operator shapes of the blocks flagged in `used`, plus the head.
pub fn op_specs(layout: &Layout, g: &Genotype, used: &[bool]) -> Vec<(usize, ops::OpSpec)> {
    Plan::new(layout, g, used).op_specs(layout, g)
}

/// Per-sample FLOPs of the used operators (embedding lookups excluded).
pub fn genotype_flops(layout: &Layout, p: &PrunedGenotype) -> u64 {
    op_specs(layout, &p.genotype, &p.used).iter().map(|(_, s)| ops::flops(s)).sum()
}

/// Trainable scalars of the used operators and the head, embeddings
/// excluded.
pub fn genotype_params(layout: &Layout, p: &PrunedGenotype) -> ParamCount {
    op_specs(layout, &p.genotype, &p.used).iter().map(|(_, s)| ops::param_count(s)).sum()
}

/// Runs the forward pass for `g` with parameters supplied by `binder`.
pub fn forward_with<'a, B: Binder<'a>>(
    t: &mut Tape<'a>,
    binder: &mut B,
    layout: &Layout,
    g: &Genotype,
    batch: &FeatureBatch,
) -> std::result::Result<ForwardOut, TensorError> {
    let plan = Plan::new(layout, g, &g.used_blocks());
    forward::forward_impl(t, binder, layout, g, &plan, batch, false)
}

/// A network whose parameters can be bound for a genotype: the supernet
/// (shared, maximal weights) or a standalone model (compact weights).
pub trait Network {
    fn layout(&self) -> &Layout;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn bind_mode(&self) -> BindMode;

    /// Forward pass recording trainable bindings selected by `trainable`.
    fn forward_tape<'a>(
        &'a self,
        t: &mut Tape<'a>,
        g: &Genotype,
        batch: &FeatureBatch,
        trainable: &dyn Fn(&str) -> bool,
    ) -> std::result::Result<(ForwardOut, Vec<Binding>), TensorError> {
        let mut b = StoreBinder::new(self.params(), self.bind_mode(), trainable);
        let out = forward_with(t, &mut b, self.layout(), g, batch)?;
        Ok((out, b.bindings))
    }

    /// Raw logits of `batch`.
    fn logits_for(&self, g: &Genotype, batch: &FeatureBatch) -> std::result::Result<Vec<f64>, TensorError> {
        let mut t = Tape::new();
        let (out, _) = self.forward_tape(&mut t, g, batch, &no_params)?;
        Ok(t.value(out.logits).data().to_vec())
    }

    /// Click probabilities for every row of `data`.
    fn predict_for(&self, g: &Genotype, data: &Dataset, batch_size: usize) -> std::result::Result<Vec<f64>, TensorError> {
        let mut out = Vec::with_capacity(data.len());
        for b in data.batches(batch_size) {
            out.extend(self.logits_for(g, &b)?.into_iter().map(crate::tensor::sigmoid));
        }
        Ok(out)
    }
}

/// Maximal weights for every operator of every block.
#[derive(Debug, Clone, PartialEq)]
pub struct Supernet {
    pub space: SpaceConfig,
    pub features: FeatureSpec,
    pub layout: Layout,
    pub params: ParamStore,
    pub seed: u64,
}

impl Network for Supernet {
    fn layout(&self) -> &Layout {
        &self.layout
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn bind_mode(&self) -> BindMode {
        BindMode::Shared
    }
}

/// Shapes and initializers of every supernet parameter.
pub fn param_shapes(space: &SpaceConfig, layout: &Layout) -> Vec<(String, Vec<usize>, Init)> {
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let lin = |out: &mut Vec<_>, key: String, rows: usize, cols: usize| {
        out.push((format!("{key}.w"), vec![rows, cols], Init::Uniform));
        out.push((format!("{key}.b"), vec![cols], Init::Zeros));
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, key: String, len: usize| {
        out.push((format!("{key}.g"), vec![len], Init::Ones));
        out.push((format!("{key}.b"), vec![len], Init::Zeros));
    };
    let (ds, md, mn, mb) = (layout.dim_s, layout.max_d, layout.max_n, layout.binary_max());
    for n in 1..=layout.num_blocks {
        let (din, nin) = (layout.din_max(n), layout.nin_max(n));
        for op in &space.dense_ops {
            match op {
                DenseOp::Fc => {
                    lin(&mut out, format!("b{n}.fc"), din, md);
                    norm(&mut out, format!("b{n}.fc.ln"), md);
                }
                DenseOp::SigmoidGating => {
                    lin(&mut out, format!("b{n}.sg"), din, mb);
                    norm(&mut out, format!("b{n}.sg.ln"), mb);
                }
                DenseOp::Sum => norm(&mut out, format!("b{n}.sum.ln"), mb),
                DenseOp::DotProduct => {
                    if din > 0 {
                        lin(&mut out, format!("b{n}.dp.proj"), din, ds);
                    }
                    if layout.balanced {
                        out.push((format!("b{n}.dp.bal.w"), vec![nin, layout.balance_max()], Init::Uniform));
                    }
                    let slots = layout.dp_slots(n);
                    lin(&mut out, format!("b{n}.dp.out"), slots * (slots - 1) / 2, md);
                    norm(&mut out, format!("b{n}.dp.ln"), md);
                }
            }
        }
        for op in &space.sparse_ops {
            match op {
                SparseOp::Efc => {
                    lin(&mut out, format!("b{n}.efc"), nin, mn);
                    norm(&mut out, format!("b{n}.efc.ln"), ds);
                }
                SparseOp::Attention => {
                    for p in ["q", "k", "v", "o"] {
                        lin(&mut out, format!("b{n}.attn.{p}"), ds, ds);
                    }
                    lin(&mut out, format!("b{n}.attn.ff1"), ds, 2 * ds);
                    lin(&mut out, format!("b{n}.attn.ff2"), 2 * ds, ds);
                    norm(&mut out, format!("b{n}.attn.ln1"), ds);
                    norm(&mut out, format!("b{n}.attn.ln2"), ds);
                }
            }
        }
        if space.allow_mergers {
            lin(&mut out, format!("b{n}.d2s"), md, D2S_EMBEDDINGS * ds);
            lin(&mut out, format!("b{n}.s2d"), ds, md);
            norm(&mut out, format!("b{n}.s2d.ln"), md);
        }
    }
    lin(&mut out, "head".into(), md, 1);
    out.push(("emb".into(), vec![layout.total_vocab(), ds], Init::Table));
    out
}

/// Checkpoint metadata of a supernet.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SupernetMeta {
    kind: String,
    space: SpaceConfig,
    features: FeatureSpec,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    kind: String,
    space: SpaceConfig,
    features: FeatureSpec,
    genotype: serde_json::Value,
}

impl Supernet {
    /// Allocates every weight at its maximal shape, initialized
    /// deterministically from `seed`.
    pub fn build(space: &SpaceConfig, features: &FeatureSpec, seed: u64) -> Result<Supernet> {
        space.check().map_err(SupernetError::Space)?;
        features.check().map_err(SupernetError::Features)?;
        let layout = Layout::new(space, features);
        let mut params = ParamStore::new();
        for (key, shape, init) in param_shapes(space, &layout) {
            let t = init_tensor(seed, &key, &shape, init);
            params.insert(key, t);
        }
        Ok(Supernet {
            space: space.clone(),
            features: features.clone(),
            layout,
            params,
            seed,
        })
    }

    pub fn check_genotype(&self, g: &Genotype) -> Result<()> {
        g.validate(&self.space).map_err(SupernetError::Genotype)
    }

    /// Raw logits of `g` on `batch`.
    pub fn forward(&self, g: &Genotype, batch: &FeatureBatch) -> Result<Vec<f64>> {
        self.check_genotype(g)?;
        Ok(self.logits_for(g, batch)?)
    }

    /// Probabilities of `g` for every row of `data`.
    pub fn predict(&self, g: &Genotype, data: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
        self.check_genotype(g)?;
        Ok(self.predict_for(g, data, batch_size)?)
    }

    /// Logits with the operators of every branch evaluated in reverse order.
    pub fn forward_reversed(&self, g: &Genotype, batch: &FeatureBatch) -> Result<Vec<f64>> {
        self.check_genotype(g)?;
        let mut t = Tape::new();
        let mut b = StoreBinder::new(&self.params, BindMode::Shared, &no_params);
        let plan = Plan::new(&self.layout, g, &g.used_blocks());
        let out = forward::forward_impl(&mut t, &mut b, &self.layout, g, &plan, batch, true)?;
        Ok(t.value(out.logits).data().to_vec())
    }

    /// Dense output of every used block zero-padded to the maximal width,
    /// as it would appear in a masked maximal-width evaluation.
    pub fn masked_block_outputs(&self, g: &Genotype, batch: &FeatureBatch) -> Result<Vec<Option<Tensor>>> {
        self.check_genotype(g)?;
        let mut t = Tape::new();
        let (out, _) = self.forward_tape(&mut t, g, batch, &no_params)?;
        let mut res = vec![None];
        for o in out.outputs.iter().skip(1) {
            res.push(match o {
                Some(b) => {
                    let v = t.pad(b.dense, 1, self.layout.max_d)?;
                    Some(t.value(v).clone())
                }
                None => None,
            });
        }
        Ok(res)
    }

    /// Tape FLOPs of one forward pass, divided by the batch size.
    pub fn measured_flops(&self, g: &Genotype, batch: &FeatureBatch) -> Result<u64> {
        self.check_genotype(g)?;
        let mut t = Tape::new();
        self.forward_tape(&mut t, g, batch, &no_params)?;
        Ok(t.flops() / batch.len().max(1) as u64)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = SupernetMeta {
            kind: "supernet".into(),
            space: self.space.clone(),
            features: self.features.clone(),
            seed: self.seed,
        };
        save_params(dir, serde_json::to_value(meta).expect("meta serializes"), &self.params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Supernet> {
        let (meta, params) = load_params(dir)?;
        let meta: SupernetMeta = serde_json::from_value(meta).map_err(|e| SupernetError::Meta(e.to_string()))?;
        if meta.kind != "supernet" {
            return Err(SupernetError::Meta(format!("expected a supernet checkpoint, found {}", meta.kind)));
        }
        let net = Supernet::build(&meta.space, &meta.features, meta.seed)?;
        for (k, t) in net.params.iter() {
            let got = params.get(k).map_err(|_| SupernetError::Meta(format!("missing tensor {k}")))?;
            if got.shape() != t.shape() {
                return Err(SupernetError::Meta(format!("tensor {k} has shape {:?}", got.shape())));
            }
        }
        Ok(Supernet { params, ..net })
    }
}

/// A standalone architecture with compact weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub space: SpaceConfig,
    pub features: FeatureSpec,
    pub layout: Layout,
    pub genotype: Genotype,
    pub params: ParamStore,
}

impl Network for Model {
    fn layout(&self) -> &Layout {
        &self.layout
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn bind_mode(&self) -> BindMode {
        BindMode::Compact
    }
}

/// One all-zero row, enough to discover every parameter shape.
fn probe_batch(features: &FeatureSpec) -> FeatureBatch {
    FeatureBatch {
        dense: Tensor::zeros(&[1, features.num_dense]),
        ids: vec![0; features.num_sparse()],
        labels: vec![0.0],
    }
}

impl Model {
    /// Freshly initialized standalone model for `g`.
    pub fn init(space: &SpaceConfig, features: &FeatureSpec, g: &Genotype, seed: u64) -> Result<Model> {
        space.check().map_err(SupernetError::Space)?;
        features.check().map_err(SupernetError::Features)?;
        g.validate(space).map_err(SupernetError::Genotype)?;
        let layout = Layout::new(space, features);
        let mut b = InitBinder::new(seed);
        let mut t = Tape::new();
        forward_with(&mut t, &mut b, &layout, g, &probe_batch(features))?;
        Ok(Model {
            space: space.clone(),
            features: features.clone(),
            layout,
            genotype: g.clone(),
            params: b.out,
        })
    }

    pub fn forward(&self, batch: &FeatureBatch) -> Result<Vec<f64>> {
        Ok(self.logits_for(&self.genotype, batch)?)
    }

    pub fn predict(&self, data: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
        Ok(self.predict_for(&self.genotype, data, batch_size)?)
    }

    /// Operator and head parameters (embeddings excluded).
    pub fn param_count(&self) -> u64 {
        self.params.count_where(|k| !is_embedding(k))
    }

    pub fn pruned(&self) -> PrunedGenotype {
        prune_unreachable(&self.genotype)
    }

    pub fn flops(&self) -> u64 {
        genotype_flops(&self.layout, &self.pruned())
    }

    pub fn measured_flops(&self, batch: &FeatureBatch) -> Result<u64> {
        let mut t = Tape::new();
        self.forward_tape(&mut t, &self.genotype, batch, &no_params)?;
        Ok(t.flops() / batch.len().max(1) as u64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = ModelMeta {
            kind: "model".into(),
            space: self.space.clone(),
            features: self.features.clone(),
            genotype: self.genotype.to_value(),
        };
        save_params(dir, serde_json::to_value(meta).expect("meta serializes"), &self.params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let (meta, params) = load_params(dir)?;
        let meta: ModelMeta = serde_json::from_value(meta).map_err(|e| SupernetError::Meta(e.to_string()))?;
        if meta.kind != "model" {
            return Err(SupernetError::Meta(format!("expected a model checkpoint, found {}", meta.kind)));
        }
        let genotype = Genotype::from_value(meta.genotype).map_err(|e| SupernetError::Meta(e.to_string()))?;
        let model = Model {
            layout: Layout::new(&meta.space, &meta.features),
            space: meta.space,
            features: meta.features,
            genotype,
            params,
        };
        model.forward(&probe_batch(&model.features))?;
        Ok(model)
    }
}

/// Copies the weight slices `g` uses out of the supernet.
pub fn extract_subnet(net: &Supernet, g: &Genotype) -> Result<Model> {
    net.check_genotype(g)?;
    let mut b = RecordingBinder::new(&net.params);
    let mut t = Tape::new();
    forward_with(&mut t, &mut b, &net.layout, g, &probe_batch(&net.features))?;
    Ok(Model {
        space: net.space.clone(),
        features: net.features.clone(),
        layout: net.layout.clone(),
        genotype: g.clone(),
        params: b.out,
    })
}

/// Trains only the logit head of `model` for `steps` minibatches drawn from
/// `data`; every other parameter is left bit-identical.
pub fn finetune_head(model: &Model, data: &Dataset, steps: usize, lr: f64, batch_size: usize, seed: u64) -> Result<Model> {
    let mut m = model.clone();
    if steps == 0 || data.is_empty() {
        return Ok(m);
    }
    let g = m.genotype.clone();
    crate::trainer::train_steps(&mut m, &g, data, steps, lr, batch_size, seed, &head_params)?;
    Ok(m)
}

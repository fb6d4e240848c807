//! ReRAM crossbar cost model and architecture/precision co-search.
//!
//! Matrix-vector products (FC, EFC, the dense-to-sparse merger, the linear
//! parts of dot-product, attention and the sparse-to-dense merger, and the
//! head) are tiled onto crossbars. Weights are split over
//! `ceil(bits / cell_bits)` adjacent cells and inputs are streamed
//! bit-serially through `dac_bits`-wide DACs. Everything else (pairwise
//! products, FM, softmax, normalization) runs on a digital unit, costed at
//! half the operator's remaining FLOPs.
//!
//! Block latency is the slowest branch operator plus the mergers, and blocks
//! are scheduled as a DAG over their connections: a block starts once all
//! of its sources have finished.

mod cosearch;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ops::{self, balance_width, OpKind, OpSpec};
use crate::space::{DenseOp, Genotype, SparseOp, RAW};
use crate::supernet::{Layout, Model, Plan};
use crate::tensor::{Tensor, TensorError};

pub use cosearch::{cosearch, cosearch_with, pareto_csv, pareto_front, CosearchConfig, CosearchOutcome, DesignPoint};

/// Weight precision of the mergers, which carry no precision gene.
pub const MERGER_BITS: u8 = 8;

#[derive(Debug, thiserror::Error)]
pub enum PimError {
    #[error("invalid hardware config: {0}")]
    Config(String),
    #[error("quantization bits {0} outside [2, 16]")]
    Bits(u8),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Crossbar and digital-unit constants. Times in ns, energies in pJ, areas
/// in relative units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HwConfig {
    pub rows: usize,
    pub cols: usize,
    /// Bits stored per ReRAM cell.
    pub cell_bits: u8,
    /// Input bits applied per crossbar pass.
    pub dac_bits: u8,
    pub adc_bits: u8,
    /// Latency of one crossbar pass.
    pub cycle_ns: f64,
    /// Array energy of one crossbar pass.
    pub energy_pj: f64,
    /// Energy per ADC bit per column conversion.
    pub adc_pj_per_bit: f64,
    pub ns_per_mac: f64,
    pub pj_per_mac: f64,
    /// Buffer energy per activation value written.
    pub buffer_pj_per_value: f64,
    pub crossbar_area: f64,
    pub digital_area: f64,
}

impl Default for HwConfig {
    fn default() -> Self {
        HwConfig {
            rows: 128,
            cols: 128,
            cell_bits: 2,
            dac_bits: 1,
            adc_bits: 8,
            cycle_ns: 100.0,
            energy_pj: 20.0,
            adc_pj_per_bit: 0.02,
            ns_per_mac: 0.5,
            pj_per_mac: 1.0,
            buffer_pj_per_value: 0.5,
            crossbar_area: 1.0,
            digital_area: 50.0,
        }
    }
}

impl HwConfig {
    pub fn check(&self) -> Result<(), PimError> {
        let ints = [self.rows, self.cols, self.cell_bits as usize, self.dac_bits as usize, self.adc_bits as usize];
        if ints.contains(&0) {
            return Err(PimError::Config("crossbar sizes and bit widths must be positive".into()));
        }
        if self.cell_bits > 8 {
            return Err(PimError::Config(format!("cell_bits {} exceeds 8", self.cell_bits)));
        }
        let reals = [
            self.cycle_ns,
            self.energy_pj,
            self.adc_pj_per_bit,
            self.ns_per_mac,
            self.pj_per_mac,
            self.buffer_pj_per_value,
            self.crossbar_area,
            self.digital_area,
        ];
        if reals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(PimError::Config("costs must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<HwConfig, PimError> {
        let hw: HwConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        hw.check()?;
        Ok(hw)
    }

    /// Energy of one pass through one crossbar, array plus readout.
    fn pass_energy(&self) -> f64 {
        self.energy_pj + self.cols as f64 * f64::from(self.adc_bits) * self.adc_pj_per_bit
    }
}

/// Weight and activation precision of one operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: u8,
    pub act_bits: u8,
}

/// Symmetric uniform quantization. Returns the dequantized tensor and the
/// step size; an all-zero tensor is returned unchanged with step 0.
pub fn quantize(w: &Tensor, bits: u8) -> Result<(Tensor, f64), PimError> {
    if !(2..=16).contains(&bits) {
        return Err(PimError::Bits(bits));
    }
    let max = w.max_abs();
    if max == 0.0 {
        return Ok((w.clone(), 0.0));
    }
    let qmax = f64::from((1u32 << (bits - 1)) - 1);
    // Settle the step on a floating-point fixed point of max -> max/qmax so
    // that quantizing the output again reproduces the same step exactly.
    let mut scale = max / qmax;
    for _ in 0..8 {
        let next = (scale * qmax) / qmax;
        if next == scale {
            break;
        }
        scale = next;
    }
    let data = w
        .data()
        .iter()
        .map(|&v| (v / scale).round().clamp(-qmax, qmax) * scale)
        .collect();
    Ok((Tensor::new(w.shape().to_vec(), data)?, scale))
}

/// One weight matrix on crossbars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixTile {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Matrix-vector products per sample.
    pub invocations: usize,
    pub row_tiles: usize,
    pub col_tiles: usize,
    pub crossbar_count: usize,
    pub input_bit_passes: usize,
}

/// Mapping of one operator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub kind: OpKind,
    pub matrices: Vec<MatrixTile>,
    /// Digital multiply-accumulates per sample.
    pub digital_macs: u64,
    /// Activation values the operator writes per sample.
    pub outputs: u64,
}

impl TilePlan {
    pub fn crossbar_count(&self) -> usize {
        self.matrices.iter().map(|m| m.crossbar_count).sum()
    }
}

/// `(fan_in, fan_out, invocations)` of every matrix-vector product of an
/// operator, and its output size.
fn mvm_shapes(s: &OpSpec) -> (Vec<(usize, usize, usize)>, u64) {
    let (ds, d, n) = (s.dim_s, s.out_dim, s.n_in);
    let m = s.dim_in.max(s.dim_in2);
    match s.kind {
        OpKind::Fc => (vec![(s.dim_in, d, 1)], d as u64),
        OpKind::Sg => (vec![(s.dim_in, m, 1)], m as u64),
        OpKind::Sum => (vec![], m as u64),
        OpKind::Dp => {
            let mut v = Vec::new();
            if s.dim_in > 0 {
                v.push((s.dim_in, ds, 1));
            }
            if s.balanced {
                v.push((n, balance_width(d), ds));
            }
            v.push((s.dp_pairs(), d, 1));
            (v, d as u64)
        }
        OpKind::Efc => (vec![(n, d, ds)], (d * ds) as u64),
        OpKind::Attn => {
            let mut v = vec![(ds, ds, n); 4];
            v.push((ds, 2 * ds, n));
            v.push((2 * ds, ds, n));
            (v, (d * ds) as u64)
        }
        OpKind::D2s => (vec![(s.dim_in, d * ds, 1)], (d * ds) as u64),
        OpKind::S2d => (vec![(ds, d, 1)], d as u64),
        OpKind::Head => (vec![(s.dim_in, 1, 1)], 1),
    }
}

/// Tiles an operator onto crossbars; the remaining work goes to the digital
/// unit.
pub fn map_to_crossbars(s: &OpSpec, q: QuantSpec, hw: &HwConfig) -> TilePlan {
    let (shapes, outputs) = mvm_shapes(s);
    let cells = usize::from(q.weight_bits).div_ceil(usize::from(hw.cell_bits));
    let passes = usize::from(q.act_bits).div_ceil(usize::from(hw.dac_bits));
    let mut mapped_macs = 0u64;
    let matrices = shapes
        .into_iter()
        .map(|(fan_in, fan_out, invocations)| {
            mapped_macs += (fan_in * fan_out * invocations) as u64;
            let row_tiles = fan_in.div_ceil(hw.rows);
            let col_tiles = (fan_out * cells).div_ceil(hw.cols);
            MatrixTile {
                fan_in,
                fan_out,
                invocations,
                row_tiles,
                col_tiles,
                crossbar_count: row_tiles * col_tiles,
                input_bit_passes: passes,
            }
        })
        .collect();
    let digital_flops = ops::flops(s) - 2 * mapped_macs;
    TilePlan {
        kind: s.kind,
        matrices,
        digital_macs: digital_flops.div_ceil(2),
        outputs,
    }
}

/// Aggregate cost of a design.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub latency_ns: f64,
    pub energy_pj: f64,
    pub area_units: f64,
    pub crossbars: usize,
    /// Crossbar share of `energy_pj`.
    pub crossbar_energy_pj: f64,
    pub digital_macs: u64,
}

/// Latency and energy of one mapped operator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OpCost {
    pub latency_ns: f64,
    pub energy_pj: f64,
    pub crossbar_energy_pj: f64,
}

/// Matrices of an operator run one after another; the tiles of a matrix
/// run in parallel.
pub fn op_cost(p: &TilePlan, hw: &HwConfig) -> OpCost {
    let mut c = OpCost::default();
    for m in p.matrices.iter().filter(|m| m.crossbar_count > 0) {
        let passes = (m.invocations * m.input_bit_passes) as f64;
        c.latency_ns += passes * hw.cycle_ns;
        c.crossbar_energy_pj += passes * m.crossbar_count as f64 * hw.pass_energy();
    }
    let macs = p.digital_macs as f64;
    c.latency_ns += macs * hw.ns_per_mac;
    c.energy_pj = c.crossbar_energy_pj + macs * hw.pj_per_mac + p.outputs as f64 * hw.buffer_pj_per_value;
    c
}

/// Finish times of a block DAG. `deps[n]` lists the sources of block `n`
/// (`0` is the input, available at time 0); blocks absent from `lat` are
/// skipped. Returns the finish time of every block.
pub fn dag_finish_times(lat: &[Option<f64>], deps: &[Vec<usize>]) -> Vec<f64> {
    let mut finish = vec![0.0; lat.len()];
    for n in 1..lat.len() {
        if let Some(l) = lat[n] {
            let start = deps[n].iter().map(|&s| finish[s]).fold(0.0, f64::max);
            finish[n] = start + l;
        }
    }
    finish
}

/// Precision of an operator instance of `g`.
fn op_bits(g: &Genotype, block: usize, kind: OpKind) -> u8 {
    if kind == OpKind::Head {
        return g.head.bits;
    }
    let b = g.block(block);
    let dense = |op| b.dense.get(&op).map(|c| c.bits);
    let sparse = |op| b.sparse.get(&op).map(|c| c.bits);
    let bits = match kind {
        OpKind::Fc => dense(DenseOp::Fc),
        OpKind::Sg => dense(DenseOp::SigmoidGating),
        OpKind::Sum => dense(DenseOp::Sum),
        OpKind::Dp => dense(DenseOp::DotProduct),
        OpKind::Efc => sparse(SparseOp::Efc),
        OpKind::Attn => sparse(SparseOp::Attention),
        OpKind::D2s | OpKind::S2d | OpKind::Head => None,
    };
    bits.unwrap_or(MERGER_BITS)
}

/// Every operator of the used part of `g` with its precision and mapping.
pub fn genotype_tiles(layout: &Layout, g: &Genotype, act_bits: u8, hw: &HwConfig) -> Vec<(usize, TilePlan)> {
    let plan = Plan::new(layout, g, &g.used_blocks());
    plan.op_specs(layout, g)
        .into_iter()
        .map(|(block, s)| {
            let q = QuantSpec {
                weight_bits: op_bits(g, block, s.kind),
                act_bits,
            };
            (block, map_to_crossbars(&s, q, hw))
        })
        .collect()
}

/// Latency, energy and area of `g` on `hw`.
pub fn genotype_cost(layout: &Layout, g: &Genotype, act_bits: u8, hw: &HwConfig) -> CostReport {
    let n = g.num_blocks();
    let tiles = genotype_tiles(layout, g, act_bits, hw);
    // Branch operators of a block run side by side; mergers follow them.
    let mut branch = vec![0.0f64; n + 2];
    let mut merge = vec![0.0f64; n + 2];
    let mut r = CostReport::default();
    for (block, p) in &tiles {
        let c = op_cost(p, hw);
        match p.kind {
            OpKind::D2s | OpKind::S2d | OpKind::Head => merge[*block] += c.latency_ns,
            _ => branch[*block] = branch[*block].max(c.latency_ns),
        }
        r.energy_pj += c.energy_pj;
        r.crossbar_energy_pj += c.crossbar_energy_pj;
        r.crossbars += p.crossbar_count();
        r.digital_macs += p.digital_macs;
    }
    let used = g.used_blocks();
    let mut lat = vec![None; n + 2];
    let mut deps = vec![Vec::new(); n + 2];
    for b in 1..=n {
        if used[b] {
            lat[b] = Some(branch[b] + merge[b]);
            deps[b] = g.block(b).connections.iter().copied().collect();
        }
    }
    lat[n + 1] = Some(merge[n + 1]);
    deps[n + 1] = vec![if n == 0 { RAW } else { n }];
    r.latency_ns = dag_finish_times(&lat, &deps)[n + 1];
    r.area_units = r.crossbars as f64 * hw.crossbar_area + hw.digital_area;
    r
}

/// Weight precision of a parameter key of a model of `g`, if it is a PIM
/// weight.
pub fn key_bits(g: &Genotype, key: &str) -> Option<u8> {
    if !key.ends_with(".w") {
        return None;
    }
    if key == "head.w" {
        return Some(g.head.bits);
    }
    let rest = key.strip_prefix('b')?;
    let (n, op) = rest.split_once('.')?;
    let block: usize = n.parse().ok()?;
    let kind = match op.split('.').next()? {
        "fc" => OpKind::Fc,
        "sg" => OpKind::Sg,
        "dp" => OpKind::Dp,
        "efc" => OpKind::Efc,
        "attn" => OpKind::Attn,
        "d2s" => OpKind::D2s,
        "s2d" => OpKind::S2d,
        _ => return None,
    };
    (1..=g.num_blocks()).contains(&block).then(|| op_bits(g, block, kind))
}

/// A copy of `model` with every PIM weight fake-quantized to its
/// operator's precision. Biases, norms and embedding tables stay in f64.
pub fn fake_quantize(model: &Model) -> Result<Model, PimError> {
    let mut out = model.clone();
    for (key, w) in model.params.iter() {
        if let Some(bits) = key_bits(&model.genotype, key) {
            out.params.insert(key.clone(), quantize(w, bits)?.0);
        }
    }
    Ok(out)
}

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{fake_quantize, genotype_cost, CostReport, HwConfig};
use crate::data::Dataset;
use crate::evolution::{evolve, EvolutionConfig, EvolutionError, SearchRecord};
use crate::space::{Genotype, SpaceConfig};
use crate::supernet::{extract_subnet, Layout, Supernet};
use crate::trainer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CosearchConfig {
    /// Weight of the validation loss.
    pub alpha: f64,
    /// Weight of the latency, normalized by the latency of the full
    /// genotype.
    pub beta: f64,
    pub act_bits: u8,
    pub eval_batch_size: usize,
    pub evolution: EvolutionConfig,
}

impl Default for CosearchConfig {
    fn default() -> Self {
        CosearchConfig {
            alpha: 1.0,
            beta: 0.1,
            act_bits: 8,
            eval_batch_size: 4096,
            evolution: EvolutionConfig::default(),
        }
    }
}

/// Quality and cost of one searched design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub genotype_id: usize,
    pub loss: f64,
    pub cost: CostReport,
}

pub struct CosearchOutcome {
    pub history: Vec<SearchRecord>,
    /// One point per history record.
    pub points: Vec<DesignPoint>,
    /// Indices into `points` of the non-dominated designs, one per distinct
    /// genotype, by ascending loss.
    pub pareto: Vec<usize>,
}

/// Indices of the points not dominated in (loss, latency, energy). Points
/// with a non-finite loss are excluded; duplicates keep the first.
pub fn pareto_front(points: &[DesignPoint]) -> Vec<usize> {
    let key = |p: &DesignPoint| [p.loss, p.cost.latency_ns, p.cost.energy_pj];
    let dominates = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).all(|(x, y)| x <= y) && a != b;
    let mut front: Vec<usize> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let k = key(p);
        if !p.loss.is_finite() || front.iter().any(|&j| key(&points[j]) == k) {
            continue;
        }
        if points.iter().any(|q| q.loss.is_finite() && dominates(key(q), k)) {
            continue;
        }
        front.push(i);
    }
    front.sort_by(|&a, &b| points[a].loss.total_cmp(&points[b].loss).then(a.cmp(&b)));
    front
}

/// `loss,latency_ns,energy_pj,genotype_id` rows of the selected points.
pub fn pareto_csv(points: &[DesignPoint], front: &[usize]) -> String {
    let mut s = String::from("loss,latency_ns,energy_pj,genotype_id\n");
    for &i in front {
        let p = &points[i];
        s.push_str(&format!("{:.6},{:.3},{:.3},{}\n", p.loss, p.cost.latency_ns, p.cost.energy_pj, p.genotype_id));
    }
    s
}

/// Evolution over architecture and precision genes with fitness
/// `alpha · loss(g) + beta · latency(g) / latency(full)`.
pub fn cosearch_with<L: Fn(&Genotype) -> f64 + Sync>(
    loss: &L,
    layout: &Layout,
    space: &SpaceConfig,
    hw: &HwConfig,
    cfg: &CosearchConfig,
    sink: &mut dyn FnMut(&SearchRecord),
) -> Result<CosearchOutcome, EvolutionError> {
    hw.check().map_err(|e| EvolutionError::Config(e.to_string()))?;
    let reference = genotype_cost(layout, &Genotype::full(space), cfg.act_bits, hw).latency_ns.max(f64::MIN_POSITIVE);
    let seen: Mutex<HashMap<Genotype, (f64, CostReport)>> = Mutex::new(HashMap::new());
    let measure = |g: &Genotype| {
        if let Some(v) = seen.lock().expect("cache lock").get(g) {
            return *v;
        }
        let v = (loss(g), genotype_cost(layout, g, cfg.act_bits, hw));
        seen.lock().expect("cache lock").insert(g.clone(), v);
        v
    };
    let fitness = |g: &Genotype| {
        let (l, c) = measure(g);
        cfg.alpha * l + cfg.beta * c.latency_ns / reference
    };
    let history = evolve(&fitness, &cfg.evolution, space, Vec::new(), sink)?;
    let points: Vec<DesignPoint> = history
        .iter()
        .map(|r| {
            let (loss, cost) = measure(&r.genotype);
            DesignPoint {
                genotype_id: r.id,
                loss,
                cost,
            }
        })
        .collect();
    let pareto = pareto_front(&points);
    Ok(CosearchOutcome { history, points, pareto })
}

/// Co-search scored by the validation log loss of the fake-quantized
/// subnet inherited from `net`.
pub fn cosearch(
    net: &Supernet,
    val: &Dataset,
    hw: &HwConfig,
    cfg: &CosearchConfig,
    sink: &mut dyn FnMut(&SearchRecord),
) -> Result<CosearchOutcome, EvolutionError> {
    let loss = |g: &Genotype| {
        let score = || -> Result<f64, Box<dyn std::error::Error>> {
            let m = fake_quantize(&extract_subnet(net, g)?)?;
            Ok(trainer::evaluate(&m, g, val, cfg.eval_batch_size)?.log_loss)
        };
        score().unwrap_or(f64::NAN)
    };
    cosearch_with(&loss, &net.layout, &net.space, hw, cfg, sink)
}

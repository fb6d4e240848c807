// Synthetic click logs drawn from a planted second-order FM teacher.
//
// Dense counts are log-normal integers mapped through ln(1 + x); sparse ids
// follow a Zipf law per field. The teacher score is
//   s = a·(Σ_d w_d·(x_d − x̄_d) + Σ_f w_f[id_f]) + b·Σ_{f<g} <v_f[id_f], v_g[id_g]>
// where a and b give the pairwise term a fixed share of the score variance
// and the total a target standard deviation. Labels are
// Bernoulli(sigmoid(s)). A rescaled score std of 2 leaves a Bayes log loss
// well below ln 2, so the task is learnable by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Zipf};
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSpec};
use crate::tensor::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub rows: usize,
    pub spec: FeatureSpec,
    pub seed: u64,
    /// Standard deviation of the rescaled teacher score.
    pub score_std: f64,
    /// Latent factor width of the teacher's pairwise term.
    pub factor_dim: usize,
    /// Zipf exponent of the id distribution.
    pub zipf: f64,
    /// Fraction of the score variance carried by the pairwise term.
    pub interaction_share: f64,
    /// All teacher weights zero: labels are fair coin flips.
    pub zero_teacher: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rows: 100_000,
            spec: FeatureSpec::criteo(100),
            seed: 0,
            score_std: 2.0,
            factor_dim: 4,
            zipf: 1.05,
            interaction_share: 0.5,
            zero_teacher: false,
        }
    }
}

struct Teacher {
    dense_w: Vec<f64>,
    dense_mean: Vec<f64>,
    id_w: Vec<Vec<f64>>,
    factors: Vec<Vec<f64>>,
    k: usize,
    lin_scale: f64,
    pair_scale: f64,
}

impl Teacher {
    fn draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Teacher {
        let k = cfg.factor_dim;
        let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
        let fac = Normal::new(0.0, 1.0 / (k.max(1) as f64).sqrt()).expect("valid normal");
        let z = cfg.zero_teacher;
        let draw = |d: &Normal<f64>, rng: &mut ChaCha8Rng| if z { 0.0 } else { d.sample(rng) };
        let dense_w = (0..cfg.spec.num_dense).map(|_| draw(&std_normal, rng)).collect();
        let id_w = cfg
            .spec
            .vocab
            .iter()
            .map(|&v| (0..v).map(|_| draw(&std_normal, rng)).collect())
            .collect();
        let factors = cfg
            .spec
            .vocab
            .iter()
            .map(|&v| (0..v * k).map(|_| draw(&fac, rng)).collect())
            .collect();
        Teacher {
            dense_w,
            dense_mean: vec![0.0; cfg.spec.num_dense],
            id_w,
            factors,
            k,
            lin_scale: 1.0,
            pair_scale: 1.0,
        }
    }

    /// Linear and pairwise parts of the unscaled score.
    fn parts(&self, dense: &[f64], ids: &[u32]) -> (f64, f64) {
        let mut s: f64 = dense
            .iter()
            .zip(&self.dense_w)
            .zip(&self.dense_mean)
            .map(|((x, w), m)| w * (x - m))
            .sum();
        for (f, &id) in ids.iter().enumerate() {
            s += self.id_w[f][id as usize];
        }
        // Pairwise term via the FM identity 0.5·(|Σv|² − Σ|v|²).
        let k = self.k;
        let mut sum = vec![0.0; k];
        let mut sq = 0.0;
        for (f, &id) in ids.iter().enumerate() {
            let v = &self.factors[f][id as usize * k..(id as usize + 1) * k];
            for (a, b) in sum.iter_mut().zip(v) {
                *a += b;
            }
            sq += v.iter().map(|x| x * x).sum::<f64>();
        }
        (s, 0.5 * (sum.iter().map(|x| x * x).sum::<f64>() - sq))
    }

    fn score(&self, dense: &[f64], ids: &[u32]) -> f64 {
        let (l, p) = self.parts(dense, ids);
        self.lin_scale * l + self.pair_scale * p
    }
}

fn draw_row(cfg: &SynthConfig, rng: &mut ChaCha8Rng, dense: &mut Vec<f64>, ids: &mut Vec<u32>) {
    let counts = LogNormal::<f64>::new(1.0, 1.2).expect("valid log-normal");
    dense.clear();
    ids.clear();
    for _ in 0..cfg.spec.num_dense {
        let x = counts.sample(rng).floor();
        dense.push(x.ln_1p());
    }
    for &v in &cfg.spec.vocab {
        // Ids 1..v; 0 stays reserved for missing values.
        let zipf = Zipf::new((v - 1) as f64, cfg.zipf).expect("valid zipf");
        ids.push(zipf.sample(rng) as u32);
    }
}

/// Generates `cfg.rows` labelled rows; identical configs give identical
/// datasets.
pub fn synth_generate(cfg: &SynthConfig) -> Dataset {
    assert!(cfg.rows >= 1, "synth_generate needs at least one row");
    cfg.spec.check().expect("valid feature spec");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut teacher = Teacher::draw(cfg, &mut rng);

    // Calibrate centering and scale on a pilot sample from a separate stream.
    let mut pilot_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let (mut dense, mut ids) = (Vec::new(), Vec::new());
    let pilot = 4096;
    let mut rows = Vec::with_capacity(pilot);
    for _ in 0..pilot {
        draw_row(cfg, &mut pilot_rng, &mut dense, &mut ids);
        rows.push((dense.clone(), ids.clone()));
    }
    for j in 0..cfg.spec.num_dense {
        teacher.dense_mean[j] = rows.iter().map(|(d, _)| d[j]).sum::<f64>() / pilot as f64;
    }
    let sd = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
    };
    let parts: Vec<(f64, f64)> = rows.iter().map(|(d, i)| teacher.parts(d, i)).collect();
    let r = cfg.interaction_share.clamp(0.0, 1.0);
    let lin: Vec<f64> = parts.iter().map(|p| p.0).collect();
    let pair: Vec<f64> = parts.iter().map(|p| p.1).collect();
    let weight = |share: f64, s: f64| if s > 0.0 { share.sqrt() / s } else { 0.0 };
    teacher.lin_scale = weight(1.0 - r, sd(&lin));
    teacher.pair_scale = weight(r, sd(&pair));
    let scores: Vec<f64> = rows.iter().map(|(d, i)| teacher.score(d, i)).collect();
    let mean = scores.iter().sum::<f64>() / pilot as f64;
    let total = sd(&scores);
    let scale = if total > 0.0 { cfg.score_std / total } else { 0.0 };
    teacher.lin_scale *= scale;
    teacher.pair_scale *= scale;
    let offset = -mean * scale;

    let mut out = Dataset::empty(cfg.spec.clone());
    out.dense.reserve(cfg.rows * cfg.spec.num_dense);
    out.ids.reserve(cfg.rows * cfg.spec.num_sparse());
    out.labels.reserve(cfg.rows);
    for _ in 0..cfg.rows {
        draw_row(cfg, &mut rng, &mut dense, &mut ids);
        let s = teacher.score(&dense, &ids) + offset;
        let y = if rng.random_bool(sigmoid(s)) { 1.0 } else { 0.0 };
        out.push(&dense, &ids, y);
    }
    out
}

use super::*;
use crate::space::DenseOp;

fn space3() -> SpaceConfig {
    SpaceConfig {
        num_blocks: 3,
        ..SpaceConfig::full()
    }
}

fn fc_fitness(g: &Genotype) -> f64 {
    -(g.fc_count() as f64)
}

fn run(seed: u64, cfg: &EvolutionConfig) -> Vec<SearchRecord> {
    let cfg = EvolutionConfig { seed, ..cfg.clone() };
    evolve(&fc_fitness, &cfg, &space3(), Vec::new(), &mut |_| {}).unwrap()
}

#[test]
fn white_box_optimum_is_found() {
    let cfg = EvolutionConfig::default();
    for seed in 0..10 {
        let h = run(seed, &cfg);
        let b = best(&h).unwrap();
        assert_eq!(b.fitness, -3.0, "seed {seed}");
        assert!(b.genotype.blocks.iter().all(|bl| bl.dense.contains_key(&DenseOp::Fc)));
    }
}

#[test]
fn history_shape_and_aging_rule() {
    let cfg = EvolutionConfig {
        population_size: 20,
        iterations: 30,
        tournament: 5,
        children_per_iter: 4,
        ..EvolutionConfig::default()
    };
    let h = run(3, &cfg);
    assert_eq!(h.len(), cfg.history_len());
    let space = space3();
    for (i, r) in h.iter().enumerate() {
        assert_eq!(r.id, i);
        r.genotype.validate(&space).unwrap();
        if i < cfg.population_size {
            assert_eq!((r.iteration, r.parent), (0, None));
            continue;
        }
        // The population an iteration draws from is exactly the most recent
        // `population_size` insertions.
        let t = r.iteration;
        let end = cfg.population_size + (t - 1) * cfg.children_per_iter;
        let parent = r.parent.unwrap();
        assert!(parent >= end - cfg.population_size && parent < end, "{i}: parent {parent}");
    }
}

#[test]
fn same_seed_same_history() {
    let cfg = EvolutionConfig {
        iterations: 40,
        ..EvolutionConfig::default()
    };
    assert_eq!(run(5, &cfg), run(5, &cfg));
    assert_ne!(run(5, &cfg), run(6, &cfg));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let cfg = EvolutionConfig {
        population_size: 16,
        iterations: 12,
        tournament: 4,
        children_per_iter: 3,
        seed: 9,
        ..EvolutionConfig::default()
    };
    let full = run(9, &cfg);
    let cut = cfg.population_size + 5 * cfg.children_per_iter;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.jsonl");
    std::fs::write(&path, history_to_jsonl(&full[..cut]) + "{\"id\": 99, \"trunc").unwrap();
    let prefix = read_history(&path).unwrap();
    assert_eq!(prefix, full[..cut]);
    let mut appended = Vec::new();
    let resumed = evolve(&fc_fitness, &cfg, &space3(), prefix, &mut |r| appended.push(r.id)).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(appended, (cut..full.len()).collect::<Vec<_>>());
    assert!(evolve(&fc_fitness, &cfg, &space3(), full[..cut - 1].to_vec(), &mut |_| {}).is_err());
}

#[test]
fn nan_fitness_is_flagged_and_worst() {
    let fit = |g: &Genotype| if g.fc_count() == 0 { f64::NAN } else { -(g.fc_count() as f64) };
    let cfg = EvolutionConfig {
        iterations: 10,
        ..EvolutionConfig::default()
    };
    let h = evolve(&fit, &cfg, &space3(), Vec::new(), &mut |_| {}).unwrap();
    let bad: Vec<_> = h.iter().filter(|r| r.invalid).collect();
    assert!(!bad.is_empty());
    assert!(bad.iter().all(|r| r.fitness == f64::MAX && r.genotype.fc_count() == 0));
    assert!(h.iter().all(|r| r.fitness.is_finite()));
    let line = serde_json::to_string(bad[0]).unwrap();
    assert_eq!(&serde_json::from_str::<SearchRecord>(&line).unwrap(), bad[0]);
}

#[test]
fn config_invariants() {
    let bad = EvolutionConfig {
        tournament: 200,
        ..EvolutionConfig::default()
    };
    assert!(bad.check().is_err());
    let bad = EvolutionConfig {
        children_per_iter: 0,
        ..EvolutionConfig::default()
    };
    assert!(evolve(&fc_fitness, &bad, &space3(), Vec::new(), &mut |_| {}).is_err());
}

#[test]
fn random_search_baseline() {
    let a = random_search(&fc_fitness, 1000, &space3(), 1);
    assert_eq!(a, random_search(&fc_fitness, 1000, &space3(), 1));
    let mut f: Vec<f64> = a.iter().map(|r| r.fitness).collect();
    f.sort_by(f64::total_cmp);
    assert!(best(&a).unwrap().fitness <= f[f.len() / 2]);
}

#[test]
fn evolution_matches_or_beats_random_search() {
    // A harder white-box target than the FC count: exact widths matter.
    let fit = |g: &Genotype| {
        let mut s = 0.0;
        for b in &g.blocks {
            s -= b.dense.get(&DenseOp::Fc).map_or(0.0, |c| c.dim as f64 / 1024.0);
            s += b.dense.len() as f64 * 0.1;
        }
        s
    };
    let cfg = EvolutionConfig {
        iterations: 60,
        ..EvolutionConfig::default()
    };
    let mut wins = 0;
    for seed in 0..10 {
        let cfg = EvolutionConfig { seed, ..cfg.clone() };
        let e = evolve(&fit, &cfg, &space3(), Vec::new(), &mut |_| {}).unwrap();
        let r = random_search(&fit, cfg.history_len(), &space3(), seed);
        if best(&e).unwrap().fitness <= best(&r).unwrap().fitness {
            wins += 1;
        }
    }
    assert!(wins >= 8, "{wins}");
}

#[test]
fn top_k_dedupes_and_sorts() {
    let cfg = EvolutionConfig {
        population_size: 6,
        iterations: 0,
        tournament: 2,
        children_per_iter: 1,
        ..EvolutionConfig::default()
    };
    let mut h = run(2, &cfg);
    let dup = SearchRecord {
        id: h.len(),
        ..h[0].clone()
    };
    h.push(dup);
    let top = top_k_distinct(&h, 100);
    assert_eq!(top.len(), 6);
    // Retrain "loss" is a fixed function of the genotype and rate.
    let sel = select_top_k(&h, 100, &LR_GRID, |g, lr| {
        Ok(EvalMetrics {
            log_loss: (g.to_json().len() % 7) as f64 + (lr - 0.15).abs(),
            auc: 0.5,
        })
    })
    .unwrap();
    assert_eq!(sel.len(), 6);
    assert!(sel.windows(2).all(|w| w[0].val.log_loss <= w[1].val.log_loss));
    assert!(sel.iter().all(|s| s.lr == 0.15));
}

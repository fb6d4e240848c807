//! Public-API walk through a small search: data, supernet training,
//! evolution, extraction, checkpoints and cost reports.

use nasforge_core::evolution::{best, supernet_fitness};
use nasforge_core::pim::genotype_cost;
use nasforge_core::space::{mutate, random_genotype};
use nasforge_core::supernet::Layout;
use nasforge_core::trainer::{evaluate, train_supernet};
use nasforge_core::{
    evolve, extract_subnet, split, synth_generate, EvolutionConfig, FeatureSpec, Genotype, HwConfig, Model,
    SamplingStrategy, SpaceConfig, Supernet, SynthConfig, TrainConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn space() -> SpaceConfig {
    SpaceConfig {
        num_blocks: 2,
        dense_dims: vec![8, 16],
        sparse_dims: vec![4, 8],
        dim_s: 4,
        ..SpaceConfig::full()
    }
}

fn features() -> FeatureSpec {
    FeatureSpec::new(4, 6, 30)
}

#[test]
fn small_search_end_to_end() {
    let data = synth_generate(&SynthConfig {
        rows: 4000,
        spec: features(),
        seed: 1,
        ..SynthConfig::default()
    });
    let sp = split(&data, 2);
    assert_eq!(sp.train.len() + sp.val.len() + sp.test.len(), 4000);

    let mut net = Supernet::build(&space(), &features(), 3).unwrap();
    let cfg = TrainConfig {
        batch_size: 128,
        max_steps: Some(20),
        seed: 4,
        ..TrainConfig::default()
    };
    let h = train_supernet(&mut net, SamplingStrategy::SingleOpAnyConn, &sp.train, &sp.val, &cfg).unwrap();
    assert_eq!(h.steps, 20);
    assert!(h.rows.iter().all(|r| r.train_loss.is_finite()));

    let fitness = |g: &Genotype| supernet_fitness(&net, g, &sp.val, 512, None);
    let ecfg = EvolutionConfig {
        population_size: 8,
        iterations: 4,
        tournament: 4,
        children_per_iter: 2,
        seed: 5,
        ..EvolutionConfig::default()
    };
    let history = evolve(&fitness, &ecfg, &net.space, Vec::new(), &mut |_| {}).unwrap();
    assert_eq!(history.len(), ecfg.history_len());
    let top = best(&history).unwrap();
    assert!(history.iter().all(|r| r.fitness >= top.fitness));

    // The winner scores the same as a standalone model.
    let model = extract_subnet(&net, &top.genotype).unwrap();
    let m = evaluate(&model, &model.genotype, &sp.val, 512).unwrap();
    assert!((m.log_loss - top.fitness).abs() < 1e-9);

    let dir = tempfile::tempdir().unwrap();
    model.save(&dir.path().join("m")).unwrap();
    net.save(&dir.path().join("n")).unwrap();
    assert_eq!(Model::load(&dir.path().join("m")).unwrap(), model);
    assert_eq!(Supernet::load(&dir.path().join("n")).unwrap().checksum(), net.checksum());

    let layout = Layout::new(&space(), &features());
    let cost = genotype_cost(&layout, &top.genotype, 8, &HwConfig::default());
    assert!(cost.latency_ns > 0.0 && cost.energy_pj > 0.0 && cost.crossbars > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_and_mutated_genotypes_stay_valid(seed in any::<u64>()) {
        let s = space();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_genotype(&s, &mut rng);
        prop_assert!(g.validate(&s).is_ok());
        let child = mutate(&g, &s, &mut rng);
        prop_assert!(child.validate(&s).is_ok());
        let back = Genotype::from_json(&child.to_json()).unwrap();
        prop_assert_eq!(back, child);
    }
}

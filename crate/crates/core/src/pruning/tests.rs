use super::*;
use crate::data::{synth_generate, SynthConfig};
use crate::space::random_genotype;
use crate::supernet::tests::{tiny_features, tiny_space};
use crate::tensor::grad_check;
use crate::space::Genotype;
use crate::supernet::Network;
use proptest::prelude::*;

fn tiny_model(seed: u64) -> Model {
    let space = tiny_space(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_genotype(&space, &mut rng);
    Model::init(&space, &tiny_features(), &g, seed).unwrap()
}

fn fc_model() -> Model {
    let space = tiny_space(2);
    let mut g = Genotype::full(&space);
    for b in &mut g.blocks {
        b.dense.retain(|op, _| *op == crate::space::DenseOp::Fc);
    }
    Model::init(&space, &tiny_features(), &g, 4).unwrap()
}

fn data(rows: usize, seed: u64) -> Dataset {
    synth_generate(&SynthConfig {
        rows,
        spec: tiny_features(),
        seed,
        ..SynthConfig::default()
    })
}

fn quick_cfg(t: usize) -> PruneConfig {
    PruneConfig {
        iterations: t,
        steps: 30,
        batch_size: 64,
        lr: 0.1,
        seed: 1,
        global: false,
        eval_batch_size: 512,
    }
}

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    init_tensor(seed, "x", shape, Init::Uniform)
}

#[test]
fn zero_output_layer_gives_half_mask() {
    for (m, n) in [(2, 3), (5, 5)] {
        let w = tensor(&[m, n], 1);
        let w1 = tensor(&[2 * m, m], 2);
        let w2 = Tensor::zeros(&[m, 2 * m]);
        let mask = gen_mask_values(&w, &w1, &w2).unwrap();
        assert_eq!(mask.shape(), [m, n]);
        assert!(mask.data().iter().all(|&v| v == 0.5));
    }
    let w = tensor(&[3, 4], 1);
    assert!(gen_mask_values(&w, &tensor(&[6, 2], 2), &tensor(&[3, 6], 3)).is_err());
}

#[test]
fn mask_gradients_match_finite_differences() {
    let w = tensor(&[3, 4], 1);
    let w1 = tensor(&[6, 3], 2);
    let w2 = tensor(&[3, 6], 3);
    let via_w1 = |t: &mut Tape, x: Var| {
        let (a, c) = (t.constant(w.clone()), t.constant(w2.clone()));
        let m = gen_mask(t, a, x, c)?;
        Ok(t.sum(m))
    };
    assert!(grad_check(via_w1, &w1, 1e-6).unwrap() < 1e-4);
    let via_w2 = |t: &mut Tape, x: Var| {
        let (a, b) = (t.constant(w.clone()), t.constant(w1.clone()));
        let m = gen_mask(t, a, b, x)?;
        let p = t.mul(m, a)?;
        Ok(t.sum(p))
    };
    assert!(grad_check(via_w2, &w2, 1e-6).unwrap() < 1e-4);
}

#[test]
fn apply_mask_examples() {
    let w = tensor(&[2, 3], 5);
    let ones = Tensor::full(&[2, 3], 1.0);
    assert_eq!(apply_mask(&w, &ones, &[false; 6]).unwrap(), w);
    assert!(apply_mask(&w, &ones, &[true; 6]).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(apply_mask(&w, &Tensor::full(&[3, 2], 1.0), &[false; 6]).is_err());
}

proptest! {
    #[test]
    fn apply_mask_is_elementwise(seed in 0u64..1000, zs in proptest::collection::vec(any::<bool>(), 12)) {
        let w = tensor(&[3, 4], seed);
        let m = tensor(&[3, 4], seed + 1);
        let out = apply_mask(&w, &m, &zs).unwrap();
        for i in 0..12 {
            let want = if zs[i] { 0.0 } else { w.data()[i] * m.data()[i] };
            prop_assert_eq!(out.data()[i], want);
        }
    }

    #[test]
    fn prune_steps_shrink_by_a_fifth(sizes in proptest::collection::vec(1usize..60, 1..5), t in 1usize..6, global: bool, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut zeros: ZeroSet = sizes.iter().enumerate().map(|(i, &n)| (format!("m{i}"), vec![false; n])).collect();
        let mut prev = zeros.clone();
        for _ in 0..t {
            let scores = zeros.iter().map(|(k, z)| {
                (k.clone(), (0..z.len()).map(|_| rand::Rng::random::<f64>(&mut rng)).collect())
            }).collect();
            prune_step(&mut zeros, &scores, PRUNE_FRACTION, global);
            // Once zero, always zero.
            for (k, z) in &zeros {
                prop_assert!(prev[k].iter().zip(z).all(|(&a, &b)| !a || b));
            }
            let alive = |z: &ZeroSet| z.values().flatten().filter(|&&x| !x).count();
            let before = alive(&prev);
            let removed = before - alive(&zeros);
            if global {
                prop_assert_eq!(removed, (before as f64 * PRUNE_FRACTION).round() as usize);
            } else {
                for (k, z) in &zeros {
                    let b = prev[k].iter().filter(|&&x| !x).count();
                    let a = z.iter().filter(|&&x| !x).count();
                    prop_assert_eq!(b - a, (b as f64 * PRUNE_FRACTION).round() as usize);
                }
            }
            prev = zeros.clone();
        }
        let total: usize = sizes.iter().sum();
        let expect = 0.8f64.powi(t as i32);
        // Per-step rounding drifts by at most half an entry per matrix.
        let slack = (t * sizes.len()) as f64 / total as f64;
        prop_assert!((surviving_fraction(&zeros) - expect).abs() <= slack + 1e-12);
    }
}

#[test]
fn lowest_scores_are_removed_first() {
    let mut zeros: ZeroSet = [("a".to_string(), vec![false; 5]), ("b".to_string(), vec![false; 5])].into();
    let scores: BTreeMap<String, Vec<f64>> = [
        ("a".to_string(), vec![0.1, 0.2, 0.3, 0.4, 0.5]),
        ("b".to_string(), vec![0.9, 0.8, 0.7, 0.6, 0.05]),
    ]
    .into();
    let mut local = zeros.clone();
    prune_step(&mut local, &scores, 0.2, false);
    assert_eq!(local["a"], [true, false, false, false, false]);
    assert_eq!(local["b"], [false, false, false, false, true]);
    prune_step(&mut zeros, &scores, 0.2, true);
    assert_eq!(zeros["a"], [true, false, false, false, false]);
    assert_eq!(zeros["b"], [false, false, false, false, true]);
    let skewed: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![0.0; 5]), ("b".to_string(), vec![1.0; 5])].into();
    let mut g: ZeroSet = [("a".to_string(), vec![false; 5]), ("b".to_string(), vec![false; 5])].into();
    prune_step(&mut g, &skewed, 0.2, true);
    assert_eq!(g["a"].iter().filter(|&&z| z).count(), 2);
    assert!(g["b"].iter().all(|&z| !z));
}

#[test]
fn prunable_key_filter() {
    assert!(is_prunable("b0.fc.w"));
    assert!(is_prunable("b12.dp.bal.w"));
    assert!(is_prunable("b1.s2d.w"));
    assert!(!is_prunable("b0.fc.b"));
    assert!(!is_prunable("b0.attn.q.w"));
    assert!(!is_prunable("head.w"));
    assert!(!is_prunable("emb.table"));
    let m = tiny_model(3);
    for k in prunable_keys(&m) {
        assert_eq!(m.params.get(&k).unwrap().rank(), 2);
    }
}

#[test]
fn structured_flops_credit_whole_rows_and_columns() {
    let mut m = fc_model();
    let base = structured_flops(&m);
    assert_eq!(base, m.flops());
    let key = prunable_keys(&m).into_iter().find(|k| k.ends_with(".fc.w")).unwrap();
    let (r, c) = {
        let w = m.params.get(&key).unwrap();
        (w.shape()[0], w.shape()[1])
    };
    // A scattered zero earns nothing.
    m.params.get_mut(&key).unwrap().data_mut()[0] = 0.0;
    assert_eq!(structured_flops(&m), base);
    // A whole zero row removes `c` MACs.
    for v in &mut m.params.get_mut(&key).unwrap().data_mut()[..c] {
        *v = 0.0;
    }
    assert_eq!(structured_flops(&m), base - 2 * c as u64);
    // Adding a zero column removes the remaining `r - 1` entries of it.
    for i in 0..r {
        m.params.get_mut(&key).unwrap().data_mut()[i * c + 1] = 0.0;
    }
    assert_eq!(structured_flops(&m), base - 2 * (c + r - 1) as u64);
}

#[test]
fn zero_rounds_return_the_input() {
    let m = tiny_model(1);
    let d = data(200, 1);
    let out = iterate_prune(&m, &d, &d, &quick_cfg(0)).unwrap();
    assert!(out.rows.is_empty());
    assert_eq!(out.model, m);
    assert_eq!(surviving_fraction(&out.zeros), 1.0);
}

#[test]
fn folded_model_matches_masked_forward() {
    let m = fc_model();
    let d = data(300, 2);
    let cfg = quick_cfg(1);
    let zeros: ZeroSet = prunable_keys(&m)
        .into_iter()
        .map(|k| {
            let n = m.params.get(&k).unwrap().len();
            (k, (0..n).map(|i| i % 3 == 0).collect())
        })
        .collect();
    for variant in [Variant::Mask, Variant::Magnitude] {
        let round = train_round(&m, &zeros, variant, &d, &cfg).unwrap();
        let f = folded(&round, &zeros, variant).unwrap();
        let keep: BTreeMap<String, Tensor> = zeros
            .iter()
            .map(|(k, z)| (k.clone(), keep_tensor(m.params.get(k).unwrap().shape(), z)))
            .collect();
        let batch = d.batch(&(0..50).collect::<Vec<_>>());
        let mut t = Tape::new();
        let mut b = MaskBinder {
            inner: StoreBinder::new(&round.model.params, BindMode::Compact, &all_params),
            mlps: &round.mlps,
            keep: &keep,
            variant,
            mask_bindings: Vec::new(),
        };
        let out = forward_with(&mut t, &mut b, &m.layout, &m.genotype, &batch).unwrap();
        let masked = t.value(out.logits).data().to_vec();
        let plain = f.logits_for(&f.genotype, &batch).unwrap();
        for (a, b) in masked.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12, "{variant:?}: {a} vs {b}");
        }
        for (k, z) in &zeros {
            let w = f.params.get(k).unwrap();
            assert!(w.data().iter().zip(z).all(|(&v, &z)| !z || v == 0.0));
        }
    }
}

#[test]
fn schedule_rows_and_determinism() {
    let m = tiny_model(2);
    let (tr, va) = (data(400, 3), data(200, 4));
    let cfg = quick_cfg(3);
    let a = iterate_prune(&m, &tr, &va, &cfg).unwrap();
    let b = iterate_prune(&m, &tr, &va, &cfg).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.model, b.model);
    assert_eq!(a.rows.len(), 4);
    for (t, r) in a.rows.iter().enumerate() {
        assert_eq!(r.t, t);
        assert!(r.log_loss.is_finite() && r.flops_percent <= 100.0 + 1e-9);
        let expect = 0.8f64.powi(t as i32);
        assert!((r.surviving - expect).abs() < 0.05, "{t}: {}", r.surviving);
    }
    assert!(a.rows.windows(2).all(|w| w[1].surviving < w[0].surviving));
    let mg = magnitude_prune(&m, &tr, &va, &cfg).unwrap();
    assert!(mg.rows.iter().all(|r| r.variant == Variant::Magnitude));
    let csv = report_csv("synthetic", &a.rows);
    assert!(csv.starts_with("dataset,variant,T,log_loss,MFLOPs,percent,surviving\n"));
    assert_eq!(csv.lines().count(), 5);
}

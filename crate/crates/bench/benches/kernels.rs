use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nasforge_core::pim::genotype_cost;
use nasforge_core::space::random_genotype;
use nasforge_core::supernet::Layout;
use nasforge_core::{
    kendall_tau, synth_generate, FeatureSpec, Genotype, HwConfig, SpaceConfig, Supernet, SynthConfig, Tape, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let a = rand_tensor(&[n, n], &mut rng);
        let b = rand_tensor(&[n, n], &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let x = t.frozen(&a);
                let y = t.frozen(&b);
                black_box(t.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn supernet_forward(c: &mut Criterion) {
    let space = SpaceConfig {
        num_blocks: 3,
        dense_dims: vec![16, 32, 64],
        sparse_dims: vec![8, 16],
        dim_s: 8,
        ..SpaceConfig::full()
    };
    let features = FeatureSpec::new(13, 26, 100);
    let net = Supernet::build(&space, &features, 0).unwrap();
    let data = synth_generate(&SynthConfig {
        rows: 256,
        spec: features,
        seed: 1,
        ..SynthConfig::default()
    });
    let batch = data.batch(&(0..256).collect::<Vec<_>>());
    let full = Genotype::full(&space);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sub = random_genotype(&space, &mut rng);
    c.bench_function("supernet_forward/full/256", |b| b.iter(|| black_box(net.forward(&full, &batch).unwrap())));
    c.bench_function("supernet_forward/random/256", |b| b.iter(|| black_box(net.forward(&sub, &batch).unwrap())));
}

fn kendall(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut group = c.benchmark_group("kendall_tau");
    for n in [100usize, 2000] {
        let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let b: Vec<f64> = a.iter().map(|x| x + rng.random_range(-0.3..0.3)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(kendall_tau(&a, &b).unwrap()))
        });
    }
    group.finish();
}

fn pim_cost(c: &mut Criterion) {
    let space = SpaceConfig::codesign();
    let layout = Layout::new(&space, &FeatureSpec::criteo(1000));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gs: Vec<Genotype> = (0..32).map(|_| random_genotype(&space, &mut rng)).collect();
    let hw = HwConfig::default();
    c.bench_function("genotype_cost/32", |b| {
        b.iter(|| gs.iter().map(|g| genotype_cost(&layout, g, 8, &hw).latency_ns).sum::<f64>())
    });
}

criterion_group!(benches, matmul, supernet_forward, kendall, pim_cost);
criterion_main!(benches);

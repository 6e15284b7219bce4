use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use syntx::counterfactual::{generate_counterfactual, CfConfig};
use syntx::metrics::{mst_decode, wilcoxon_exact};
use syntx::probes::{EmbeddingMatrix, Probe, ProbeType};
use syntx::toy::{LayerSplitModel, SyntheticGrammar, ToyModelConfig};
use syntx::treebank::{random_tree, tree_metrics};

fn embedding(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
}

fn trees(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let parse = random_tree(40, 1000, &mut rng);
    c.bench_function("tree_metrics n=40", |b| b.iter(|| tree_metrics(black_box(&parse))));
    let m = tree_metrics(&parse).dist.mapv(|d| d as f64 + rng.random_range(0.0..0.1));
    let w = (&m + &m.t()) / 2.0;
    c.bench_function("mst_decode n=40", |b| b.iter(|| mst_decode(black_box(&w)).unwrap()));
}

fn probes(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gold = tree_metrics(&random_tree(20, 100, &mut rng));
    let x = embedding(20, 64, 3);
    for ty in [ProbeType::Dist, ProbeType::Dist3] {
        let probe = Probe::new(ty, 64, 64, 128, 0);
        c.bench_function(&format!("grad_wrt_embeddings {ty} n=20 d=64"), |b| {
            b.iter(|| probe.grad_wrt_embeddings(black_box(&x), &gold).unwrap())
        });
    }
    let probe = Probe::new(ProbeType::Dist, 64, 64, 1, 0);
    let z = EmbeddingMatrix::new(2, x.clone(), vec![String::new(); 20]).unwrap();
    let config = CfConfig {
        learning_rate: 1e-3,
        patience: 200,
        max_steps: Some(200),
        ..Default::default()
    };
    c.bench_function("counterfactual 200 steps", |b| {
        b.iter(|| generate_counterfactual(&probe, black_box(&z), &gold, &config).unwrap())
    });
}

fn stats_and_model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let diffs: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("wilcoxon_exact n=25", |b| b.iter(|| wilcoxon_exact(black_box(&diffs)).unwrap()));
    let g = SyntheticGrammar::coordination();
    let model = LayerSplitModel::new(ToyModelConfig::for_grammar(&g, 0)).unwrap();
    let sentence = &g.sample_many(1, 0)[0].tokens;
    c.bench_function("toy predict", |b| b.iter(|| model.predict(black_box(sentence)).unwrap()));
}

criterion_group!(benches, trees, probes, stats_and_model);
criterion_main!(benches);

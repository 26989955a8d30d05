use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use seqrec_bench::{corpus, ranker};
use seqrec_core::autodiff::{Graph, Tensor};
use seqrec_core::eval::{evaluate, EvalConfig};
use seqrec_core::models::{Activation, GruConfig, ModelConfig, TransformerConfig};
use seqrec_core::training::{train, TrainConfig};

fn matrix(rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.5).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn matmul_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_backward");
    for n in [32, 128] {
        let (a, b) = (matrix(n, n), matrix(n, n));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::training(0);
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                let z = g.matmul(x, y).unwrap();
                let loss = g.sum(z).unwrap();
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn score_prefixes(c: &mut Criterion) {
    let (train, _) = corpus(200, 50);
    let seqs: Vec<Vec<u32>> = (0..64).map(|i| (0..20).map(|j| 1 + ((i + 3 * j) % 50) as u32).collect()).collect();
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let configs = [
        ModelConfig::Gru(GruConfig {
            emb: 64,
            cell: 128,
            layers: 2,
            dropout: 0.1,
        }),
        ModelConfig::Sasrec(TransformerConfig {
            heads: 7,
            layers: 4,
            head_size: 13,
            dropout: 0.1,
            activation: Activation::Tanh,
        }),
    ];
    let mut group = c.benchmark_group("score_prefixes_64x20");
    group.sample_size(10);
    for config in configs {
        let r = ranker(config, &train, 20);
        group.bench_function(r.kind().name(), |bench| bench.iter(|| r.score_prefixes(&refs).unwrap()));
    }
    group.finish();
}

fn evaluate_split(c: &mut Criterion) {
    let (train, test) = corpus(400, 50);
    let r = ranker(
        ModelConfig::Gru(GruConfig {
            emb: 32,
            cell: 64,
            layers: 1,
            dropout: 0.1,
        }),
        &train,
        30,
    );
    let cfg = EvalConfig::default();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    group.bench_function("gru_test_split", |bench| bench.iter(|| evaluate(&r, &test, &cfg).unwrap()));
    group.finish();
}

fn train_epoch(c: &mut Criterion) {
    let (train_d, val) = corpus(100, 30);
    let config = ModelConfig::Gru(GruConfig {
        emb: 16,
        cell: 32,
        layers: 1,
        dropout: 0.1,
    });
    let cfg = TrainConfig {
        max_epochs: 1,
        patience: 1,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("gru_one_epoch", |bench| bench.iter(|| train(&config, &cfg, &train_d, &val).unwrap()));
    group.finish();
}

criterion_group!(benches, matmul_backward, score_prefixes, evaluate_split, train_epoch);
criterion_main!(benches);

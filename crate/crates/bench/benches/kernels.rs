use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedsim_bench::{batch, model, params, scores};
use fedsim_core::metrics::{
    auprc, auroc, mann_whitney_u, Alternative, Method, RankTestOptions, ScoredExamples,
};
use fedsim_core::nn::{model_backward, model_forward, Mode};
use fedsim_core::params::{weighted_average, ClientWeight};
use fedsim_core::strategies::{init_server_state, server_aggregate, ClientUpdate};
use fedsim_core::{presets, Algorithm};

fn nn(c: &mut Criterion) {
    let spec = model();
    let w = params(0);
    let mut g = c.benchmark_group("forward_backward");
    for n in [32, 256] {
        let b = batch(n, 0);
        g.bench_with_input(BenchmarkId::from_parameter(n), &b, |bench, b| {
            bench.iter(|| {
                let out = model_forward(&spec, &w, b, Mode::Train).unwrap();
                black_box(model_backward(&spec, &w, &out.cache).unwrap())
            })
        });
    }
    g.finish();
}

fn aggregation(c: &mut Criterion) {
    let sets: Vec<_> = (0..5).map(params).collect();
    let refs: Vec<_> = sets.iter().collect();
    let weights = ClientWeight::from_sizes(&[(0, 500), (1, 400), (2, 300), (3, 250), (4, 200)]);
    let names = sets[0].names();
    c.bench_function("weighted_average_5_clients", |b| {
        b.iter(|| black_box(weighted_average(&refs, &weights, &names).unwrap()))
    });

    let mut g = c.benchmark_group("server_aggregate");
    for alg in [Algorithm::FedAvg, Algorithm::FedBn, Algorithm::FedYogi] {
        let strategy = presets::default_strategy(alg);
        let state = init_server_state(&strategy, &sets[0]);
        let updates: Vec<ClientUpdate> = sets
            .iter()
            .enumerate()
            .map(|(k, p)| ClientUpdate {
                client_id: k,
                params_after: p.clone(),
                n_k: 100 * (k + 1),
                train_loss: 0.0,
                diverged: false,
            })
            .collect();
        g.bench_function(alg.name(), |b| {
            b.iter(|| black_box(server_aggregate(&strategy, &state, &updates).unwrap()))
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let mut g = c.benchmark_group("ranking_metrics");
    for n in [1_000, 10_000] {
        let (s, l) = scores(n, 0);
        let ex = ScoredExamples::new(s, l).unwrap();
        g.bench_with_input(BenchmarkId::new("auroc", n), &ex, |b, ex| {
            b.iter(|| black_box(auroc(ex).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("auprc", n), &ex, |b, ex| {
            b.iter(|| black_box(auprc(ex).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("mann_whitney");
    let two_sided = |method| RankTestOptions {
        method,
        alternative: Alternative::TwoSided,
    };
    let (a, _) = scores(10, 1);
    let (b, _) = scores(10, 2);
    g.bench_function("exact_10v10", |bench| {
        bench.iter(|| black_box(mann_whitney_u(&a, &b, two_sided(Method::Exact)).unwrap()))
    });
    let (a, _) = scores(200, 3);
    let (b, _) = scores(200, 4);
    g.bench_function("approx_200v200", |bench| {
        bench.iter(|| black_box(mann_whitney_u(&a, &b, two_sided(Method::Approx)).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, nn, aggregation, metrics);
criterion_main!(benches);

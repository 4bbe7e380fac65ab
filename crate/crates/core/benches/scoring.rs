use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use lai_valuation::data::generate_blobs;
use lai_valuation::influence::{Estimator, Preconditioner};
use lai_valuation::network::{Activation, LayerSpec, Mlp};
use lai_valuation::oracle::UtilityFn;
use lai_valuation::par::Exec;
use lai_valuation::trainer::{build_validation_cache, curate_batch_with, CostLedger, TrainerConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn net() -> Mlp {
    Mlp::new(
        &[
            LayerSpec::new(16, 64, Activation::Relu),
            LayerSpec::new(64, 64, Activation::Tanh),
            LayerSpec::new(64, 4, Activation::Linear),
        ],
        1,
    )
    .unwrap()
}

fn shapley(c: &mut Criterion) {
    let net = net();
    let pts = generate_blobs(4, 40, 16, 1.0, 2).unwrap();
    let (batch, val) = pts.split_at(12);
    let u = UtilityFn::new(&net, val, 0.05);
    let mut g = c.benchmark_group("shapley_mc_200");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| u.shapley_mc_with(black_box(batch), 200, 7, exec).unwrap())
        });
    }
    g.finish();
}

fn curation(c: &mut Criterion) {
    let net = net();
    let pts = generate_blobs(4, 96, 16, 1.0, 3).unwrap();
    let (batch, val) = pts.split_at(256);
    let precond = Preconditioner::identity(4, 0.9, 1e-8).unwrap();
    let mut g = c.benchmark_group("curate_batch_256x128");
    for e in [Estimator::Lai, Estimator::Ghost] {
        let cache = build_validation_cache(&net, val, e, 0).unwrap();
        let cfg = TrainerConfig {
            estimator: Some(e),
            ..TrainerConfig::default()
        };
        for (name, exec) in MODES {
            g.bench_function(BenchmarkId::new(e.name(), name), |b| {
                b.iter(|| {
                    let mut ledger = CostLedger::default();
                    curate_batch_with(&net, black_box(batch), &cache, &cfg, 0, &precond, &mut ledger, exec).unwrap()
                })
            });
        }
    }
    g.finish();
}

criterion_group!(benches, shapley, curation);
criterion_main!(benches);

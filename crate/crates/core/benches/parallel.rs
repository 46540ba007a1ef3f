//! Sequential vs. rayon execution of the hot batch loops.
//!
//! Build with `--no-default-features` to see both arms fall back to the
//! sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ridesub_core::allocator::{self, AllocationProblem, ClusterConfig};
use ridesub_core::domain::Provenance;
use ridesub_core::multenet::{Architecture, MulTeNetParams};
use ridesub_core::par::{self, Exec};
use ridesub_core::synthworld::{gen_world, WorldParams};

const MODES: [Exec; 2] = [Exec::Sequential, Exec::Parallel];

fn bench_model(c: &mut Criterion) {
    let world = gen_world(WorldParams::default()).unwrap();
    let data = world.generate_dataset(4096, Provenance::Observational).unwrap();
    let queries: Vec<_> = data.records.iter().map(|r| r.query.clone()).collect();
    let params = MulTeNetParams::init(world.params.feature_dim, world.n_levels(), &Architecture::default(), 3).unwrap();

    let mut g = c.benchmark_group("infer_4096");
    for exec in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| params.infer_batch_with(e, &queries).unwrap())
        });
    }
    g.finish();

    let batch = &data.records[..1024];
    let mut g = c.benchmark_group("loss_grad_1024");
    for exec in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| params.loss_with(e, batch, 1.0, 1.0).unwrap())
        });
    }
    g.finish();
}

fn bench_solver(c: &mut Criterion) {
    let world = gen_world(WorldParams::default()).unwrap();
    let queries = world.sample_queries(0, 20_000);
    let curves = par::map(Exec::Parallel, &queries, |q| world.true_elasticity(q));
    let fares = par::map(Exec::Parallel, &queries, |q| world.revenues(q));
    let costs = allocator::default_costs(world.grid(), world.services().len());
    let cfg = ClusterConfig {
        coarsening: world.coarsening(1),
        ..ClusterConfig::default()
    };
    let clusters = allocator::build_clusters(&queries, &curves, &fares, world.services(), &costs, &cfg).unwrap();
    let control: f64 = clusters.iter().map(|c| c.value(0)).sum();
    let problem = AllocationProblem {
        clusters,
        budget: 0.05 * control,
        u_lo: 0.0,
        u_hi: None,
    };
    let mut g = c.benchmark_group("lagrangian_solve");
    for exec in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| allocator::solve_lagrangian_with(e, &problem).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_model, bench_solver
}
criterion_main!(benches);

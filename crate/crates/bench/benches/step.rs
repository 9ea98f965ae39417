use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use llep_bench::{hot_layer, skewed_loads};
use llep_core::costmodel::report;
use llep_core::{
    ep_dispatch_combine, llep_dispatch_combine, simulate_counts, CostParams, ExecMode, Method, MoeConfig, PlannerConfig,
};

const PLANNER: PlannerConfig = PlannerConfig {
    alpha: 1.0,
    min_chunk: 16,
    lambda: 1.3,
};

fn bench_numeric(c: &mut Criterion) {
    let layer = hot_layer(MoeConfig::new(32, 4, 64, 64, 8).unwrap(), 256);
    let mut group = c.benchmark_group("step_N32_D64_B256");
    group.bench_function("ep", |b| {
        b.iter(|| {
            ep_dispatch_combine(
                &layer.batches,
                &layer.routings,
                &layer.params,
                &layer.config,
                ExecMode::Parallel,
            )
            .unwrap()
        })
    });
    for (name, mode) in [("llep_serial", ExecMode::Serial), ("llep_parallel", ExecMode::Parallel)] {
        group.bench_function(name, |b| {
            b.iter(|| {
                llep_dispatch_combine(
                    black_box(&layer.batches),
                    &layer.routings,
                    &layer.params,
                    &layer.config,
                    &PLANNER,
                    mode,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_counts(c: &mut Criterion) {
    let config = MoeConfig::new(128, 4, 2048, 2048, 8).unwrap();
    let loads = skewed_loads(config, 1, 0.95, 32768);
    let planner = PlannerConfig {
        min_chunk: 1024,
        ..PLANNER
    };
    let costs = CostParams::h200();
    c.bench_function("count_step_and_price_N128", |b| {
        b.iter(|| {
            let (_, m) = simulate_counts(Method::Llep, black_box(&loads), &config, &planner).unwrap();
            report(&m, &costs)
        })
    });
}

criterion_group!(benches, bench_numeric, bench_counts);
criterion_main!(benches);

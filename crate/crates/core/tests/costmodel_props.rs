use llep_core::costmodel::{device_time, workload_fingerprint};
use llep_core::{
    apportioned_loads, comm_time, compare, gemm_time, peak_memory, report, sample_loads, simulate_counts, CostParams,
    LoadMatrix, Method, MoeConfig, PathTaken, PlannerConfig, Scenario,
};
use proptest::prelude::*;

const PLANNER: PlannerConfig = PlannerConfig {
    alpha: 1.0,
    min_chunk: 1024,
    lambda: 1.3,
};

/// Max per-device token load under the native placement, from counts alone.
fn ep_max_load(loads: &LoadMatrix, config: &MoeConfig) -> usize {
    let m = config.n_experts / config.world_size;
    (0..config.world_size)
        .map(|p| loads.global_loads()[p * m..(p + 1) * m].iter().sum())
        .max()
        .unwrap()
}

#[test]
fn compute_only_speedup_is_the_max_load_ratio() {
    let config = MoeConfig::new(128, 4, 2048, 2048, 8).unwrap();
    let scenario = Scenario::concentrated(config, 1, 0.95, 32768, 0);
    for loads in [apportioned_loads(&scenario).unwrap(), sample_loads(&scenario).unwrap()] {
        let (ep_plan, ep) = simulate_counts(Method::Ep, &loads, &config, &PLANNER).unwrap();
        let (plan, llep) = simulate_counts(Method::Llep, &loads, &config, &PLANNER).unwrap();
        assert_eq!(
            ep_plan.plan.assigned_load.iter().max(),
            Some(&ep_max_load(&loads, &config))
        );

        let ep_max = ep_max_load(&loads, &config) as f64;
        let llep_max = *plan.plan.assigned_load.iter().max().unwrap() as f64;
        let p = CostParams::compute_only();
        let cmp = compare(&report(&ep, &p), &report(&llep, &p)).unwrap();
        assert!(
            (cmp.speedup - ep_max / llep_max).abs() < 1e-9,
            "{} vs {}",
            cmp.speedup,
            ep_max / llep_max
        );
        // upper bound before communication, ~7.7
        assert!((7.5..7.8).contains(&cmp.speedup), "{}", cmp.speedup);
    }
}

#[test]
fn apportioned_bound_is_frozen() {
    let config = MoeConfig::new(128, 4, 2048, 2048, 8).unwrap();
    let loads = apportioned_loads(&Scenario::concentrated(config, 1, 0.95, 32768, 0)).unwrap();
    // hot expert: 0.95 * 131072 = 124518.4 slots per device
    assert_eq!(loads.count(0, 0), 124518);
    assert_eq!(ep_max_load(&loads, &config), 1_002_384);
    let (plan, _) = simulate_counts(Method::Llep, &loads, &config, &PLANNER).unwrap();
    assert_eq!(plan.plan.assigned_load.iter().max(), Some(&131_072));
}

#[test]
fn llep_memory_respects_the_capacity_bound() {
    let config = MoeConfig::new(64, 2, 256, 512, 8).unwrap();
    let mut checked = 0;
    for (hot, x) in [(1, 0.95), (4, 0.8), (4, 0.5), (16, 0.3)] {
        let loads = sample_loads(&Scenario::concentrated(config, hot, x, 4096, 1)).unwrap();
        let (plan, m) = simulate_counts(Method::Llep, &loads, &config, &PLANNER).unwrap();
        // the bound is about planned steps; a fallback step is plain EP
        if plan.plan.force_count > 0 || plan.path != PathTaken::Llep {
            continue;
        }
        let p = CostParams::h200();
        let (d, h) = (config.d_model as u64, config.d_hidden as u64);
        for dev in 0..config.world_size {
            let s = plan.transfers.imports(dev).len() as u64;
            let bound = 2 * (plan.plan.capacity.ceil() as u64 * (d + h) + (8 + s) * d * h);
            assert!(peak_memory(&m, dev, &p) <= bound);
        }
        checked += 1;
    }
    assert!(checked >= 3);
}

#[test]
fn fingerprint_ignores_method_but_not_workload() {
    let config = MoeConfig::new(16, 2, 8, 8, 4).unwrap();
    let a = sample_loads(&Scenario::concentrated(config, 1, 0.9, 100, 1)).unwrap();
    let b = sample_loads(&Scenario::concentrated(config, 1, 0.9, 100, 2)).unwrap();
    let p = CostParams::h200();
    let (_, ep) = simulate_counts(Method::Ep, &a, &config, &PLANNER).unwrap();
    let (_, llep) = simulate_counts(Method::Llep, &a, &config, &PLANNER).unwrap();
    let (_, other) = simulate_counts(Method::Llep, &b, &config, &PLANNER).unwrap();
    assert_eq!(workload_fingerprint(&ep, &p), workload_fingerprint(&llep, &p));
    assert!(compare(&report(&ep, &p), &report(&other, &p)).is_err());
}

proptest! {
    #[test]
    fn times_are_monotone(b in 0usize..100_000, extra in 0usize..10_000, d in 1usize..4096, h in 1usize..4096) {
        let p = CostParams::h200();
        prop_assert!(gemm_time(b, d, h, &p) <= gemm_time(b + extra, d, h, &p));
        prop_assert!(comm_time(b, &p) <= comm_time(b + extra, &p));
    }

    #[test]
    fn compare_is_antisymmetric(hot in 1usize..8, x in 0.2f64..0.95, seed in any::<u64>()) {
        let config = MoeConfig::new(32, 2, 64, 64, 4).unwrap();
        let loads = sample_loads(&Scenario::concentrated(config, hot, x, 2048, seed)).unwrap();
        let (_, ep) = simulate_counts(Method::Ep, &loads, &config, &PLANNER).unwrap();
        let (_, llep) = simulate_counts(Method::Llep, &loads, &config, &PLANNER).unwrap();
        let p = CostParams::h200();
        let (a, b) = (report(&ep, &p), report(&llep, &p));
        let fwd = compare(&a, &b).unwrap();
        let back = compare(&b, &a).unwrap();
        prop_assert!((fwd.speedup * back.speedup - 1.0).abs() < 1e-12);
        prop_assert!((fwd.mem_ratio * back.mem_ratio - 1.0).abs() < 1e-12);
        prop_assert!(a.makespan_s == a.devices.iter().map(|d| d.total_s).fold(0.0, f64::max));
        prop_assert!((a.devices[0].total_s - device_time(&ep, 0, &p)).abs() < 1e-15);
    }

    #[test]
    fn compute_only_llep_never_loses(hot in 1usize..8, x in 0.3f64..0.95, seed in any::<u64>()) {
        let config = MoeConfig::new(64, 4, 128, 128, 8).unwrap();
        let loads = sample_loads(&Scenario::concentrated(config, hot, x, 1024, seed)).unwrap();
        prop_assume!(llep_core::imbalance_ratio(loads.global_loads()) >= PLANNER.lambda);
        let (_, ep) = simulate_counts(Method::Ep, &loads, &config, &PLANNER).unwrap();
        let (_, llep) = simulate_counts(Method::Llep, &loads, &config, &PLANNER).unwrap();
        let p = CostParams::compute_only();
        prop_assert!(report(&llep, &p).makespan_s <= report(&ep, &p).makespan_s);
    }
}

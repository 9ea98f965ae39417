#![allow(dead_code)]

use llep_core::rng::{stream, STREAM_PARAMS, STREAM_UPSTREAM};
use llep_core::{generate_routing, Matrix, ModelParams, MoeConfig, RouterOutput, Scenario, TokenBatch};

#[derive(Debug, Clone, Copy)]
pub enum Skew {
    Balanced,
    /// 50% of slots over 4 hot experts.
    Half4,
    /// 95% of slots into one expert.
    Hot1,
}

pub struct Case {
    pub config: MoeConfig,
    pub params: ModelParams,
    pub batches: Vec<TokenBatch>,
    pub routings: Vec<RouterOutput>,
}

pub fn scenario(config: MoeConfig, skew: Skew, b: usize, seed: u64) -> Scenario {
    let n = config.n_experts;
    match skew {
        Skew::Hot1 if n > 1 => Scenario::concentrated(config, 1, 0.95, b, seed),
        Skew::Half4 if n > 1 => Scenario::concentrated(config, 4.min(n - 1), 0.5, b, seed),
        _ => Scenario::balanced(config, b, seed),
    }
}

pub fn build(config: MoeConfig, skew: Skew, b: usize, seed: u64) -> Case {
    let params = ModelParams::random(&config, &mut stream(seed, STREAM_PARAMS));
    let (batches, routings) = generate_routing(&scenario(config, skew, b, seed), None).unwrap();
    Case {
        config,
        params,
        batches,
        routings,
    }
}

pub fn upstream(case: &Case, seed: u64) -> Vec<Matrix> {
    let mut rng = stream(seed, STREAM_UPSTREAM);
    case.batches
        .iter()
        .map(|b| Matrix::random_normal(b.len(), case.config.d_hidden, &mut rng))
        .collect()
}

pub fn max_diff(a: &[Matrix], b: &[Matrix]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| x.max_abs_diff(y).expect("shapes agree"))
        .fold(0.0, f64::max)
}

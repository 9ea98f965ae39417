//! Shared fixtures for the criterion benchmarks under `benches/`.

use llep_core::rng::{stream, STREAM_PARAMS};
use llep_core::router::RouterOutput;
use llep_core::{generate_routing, sample_loads, LoadMatrix, ModelParams, MoeConfig, Scenario, TokenBatch};

/// Counts for a production-sized layer with `hot` experts taking `fraction`
/// of the routed slots.
pub fn skewed_loads(config: MoeConfig, hot: usize, fraction: f64, tokens_per_device: usize) -> LoadMatrix {
    sample_loads(&Scenario::concentrated(config, hot, fraction, tokens_per_device, 0)).expect("valid scenario")
}

pub struct Layer {
    pub config: MoeConfig,
    pub params: ModelParams,
    pub batches: Vec<TokenBatch>,
    pub routings: Vec<RouterOutput>,
}

/// A small layer with real tensors, routed 95% to expert 0.
pub fn hot_layer(config: MoeConfig, tokens_per_device: usize) -> Layer {
    let scenario = Scenario::concentrated(config, 1, 0.95, tokens_per_device, 0);
    let (batches, routings) = generate_routing(&scenario, None).expect("valid scenario");
    Layer {
        config,
        params: ModelParams::random(&config, &mut stream(0, STREAM_PARAMS)),
        batches,
        routings,
    }
}

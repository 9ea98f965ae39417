//! Least-loaded expert parallelism for Mixture-of-Experts layers.
//!
//! The crate routes tokens to experts, plans how expert work is spread over
//! devices when routing is skewed, runs the resulting dispatch/compute/combine
//! step on simulated devices, and prices a step with an analytic latency and
//! memory model.
//!
//! ```
//! use llep_core::{lla_plan, MoeConfig, PlannerConfig};
//!
//! let config = MoeConfig::new(4, 1, 8, 8, 2).unwrap();
//! let planner = PlannerConfig { alpha: 1.0, min_chunk: 1, lambda: 1.3 };
//! let (plan, transfers) = lla_plan(&[10, 0, 0, 0], &config, &planner).unwrap();
//! assert_eq!(plan.assigned_load, vec![5, 5]);
//! assert_eq!(transfers.len(), 1);
//! ```

pub mod config;
pub mod costmodel;
pub mod error;
pub mod planner;
pub mod rng;
pub mod router;
pub mod simexec;
pub mod tensor;
pub mod workload;

pub use config::{validate_config, ModelParams, MoeConfig, PlannerConfig, TokenBatch};
pub use costmodel::{comm_time, compare, gemm_time, peak_memory, report, Comparison, CostParams, SimReport};
pub use error::{LlepError, Result};
pub use planner::{
    check_plan, gather_loads, imbalance_ratio, lla_plan, llas_spill, materialize_send_schedule, AssignmentPlan, Chunk,
    LoadMatrix, Violation, WeightTransfer, WeightTransferPlan,
};
pub use router::{combine_unsort, route, sort_reindex, RouterOutput, SortedDispatch};
pub use simexec::{
    backward_weights, ep_dispatch_combine, llep_dispatch_combine, reference_forward, simulate_counts, ExecMode, Method,
    PathTaken, StepMetrics, StepOutput,
};
pub use tensor::Matrix;
pub use workload::{apportioned_loads, generate_routing, sample_loads, target_distribution, Scenario, ScenarioMode};

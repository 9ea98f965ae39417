//! Simulated P-device execution of one MoE layer step.
//!
//! Devices are in-memory workers. A step runs in phases separated by
//! rendezvous points: local sort, load gather and planning, dispatch
//! exchange plus weight import, grouped GEMMs, combine exchange and
//! un-sort. Each phase is a per-device map, so [`ExecMode::Parallel`] and
//! [`ExecMode::Serial`] produce identical bits.

mod backward;
mod engine;
mod metrics;
mod reference;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelParams, MoeConfig, PlannerConfig, TokenBatch};
use crate::error::{LlepError, Result};
use crate::planner::{
    is_balanced, lla_plan, materialize_send_schedule, AssignmentPlan, DeviceSendSchedule, LoadMatrix,
    WeightTransferPlan,
};
use crate::router::RouterOutput;
use crate::tensor::Matrix;

pub use backward::{backward_weights, backward_weights_with, BackwardOutput, GradientAccumulator};
pub use metrics::{schedule_metrics, DeviceStepMetrics, Direction, GemmRecord, Message, MessageKind, StepMetrics};
pub use reference::{reference_forward, reference_forward_routed, reference_weight_grads, upstream_loss};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Serial,
    #[default]
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ep,
    Llep,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ep => "ep",
            Method::Llep => "llep",
        }
    }
}

/// Which dispatch path a step actually took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathTaken {
    Ep,
    /// LLEP saw `max(l)/mean(l) < lambda` and ran plain EP.
    EpFallback,
    Llep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedStep {
    pub path: PathTaken,
    pub plan: AssignmentPlan,
    pub transfers: WeightTransferPlan,
}

/// Chooses the assignment for a step from the gathered loads.
pub fn plan_step(
    method: Method,
    loads: &LoadMatrix,
    config: &MoeConfig,
    planner: &PlannerConfig,
) -> Result<PlannedStep> {
    let l = loads.global_loads();
    let native = |path| PlannedStep {
        path,
        plan: AssignmentPlan::native(l, config),
        transfers: WeightTransferPlan::default(),
    };
    match method {
        Method::Ep => Ok(native(PathTaken::Ep)),
        Method::Llep if is_balanced(l, planner.lambda) => Ok(native(PathTaken::EpFallback)),
        Method::Llep => {
            let (plan, transfers) = lla_plan(l, config, planner)?;
            Ok(PlannedStep {
                path: PathTaken::Llep,
                plan,
                transfers,
            })
        }
    }
}

/// Plan, schedule and metrics for a step described only by its counts.
/// No tensors are touched, so this scales to production-sized layers.
pub fn simulate_counts(
    method: Method,
    loads: &LoadMatrix,
    config: &MoeConfig,
    planner: &PlannerConfig,
) -> Result<(PlannedStep, StepMetrics)> {
    let planned = plan_step(method, loads, config, planner)?;
    let schedule = materialize_send_schedule(&planned.plan, loads)?;
    let metrics = schedule_metrics(config, planned.path, loads, &schedule, &planned.transfers);
    Ok((planned, metrics))
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `B_p x H` per device, in the devices' original token order.
    pub outputs: Vec<Matrix>,
    pub planned: PlannedStep,
    pub schedule: DeviceSendSchedule,
    pub metrics: StepMetrics,
}

impl StepOutput {
    pub fn plan(&self) -> &AssignmentPlan {
        &self.planned.plan
    }

    pub fn transfers(&self) -> &WeightTransferPlan {
        &self.planned.transfers
    }
}

/// Standard expert parallelism: every routed slot travels to its expert's
/// native device.
pub fn ep_dispatch_combine(
    batches: &[TokenBatch],
    routings: &[RouterOutput],
    params: &ModelParams,
    config: &MoeConfig,
    mode: ExecMode,
) -> Result<StepOutput> {
    engine::forward_step(
        Method::Ep,
        batches,
        routings,
        params,
        config,
        &PlannerConfig::default(),
        mode,
    )
}

/// Least-loaded expert parallelism. Falls back to [`ep_dispatch_combine`]
/// when the gathered loads are balanced under `planner.lambda`.
pub fn llep_dispatch_combine(
    batches: &[TokenBatch],
    routings: &[RouterOutput],
    params: &ModelParams,
    config: &MoeConfig,
    planner: &PlannerConfig,
    mode: ExecMode,
) -> Result<StepOutput> {
    planner.validate()?;
    engine::forward_step(Method::Llep, batches, routings, params, config, planner, mode)
}

pub(crate) fn map_devices<T, F>(world: usize, mode: ExecMode, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    match mode {
        ExecMode::Serial => (0..world).map(f).collect(),
        ExecMode::Parallel => (0..world).into_par_iter().map(f).collect(),
    }
}

pub(crate) fn check_inputs(
    batches: &[TokenBatch],
    routings: &[RouterOutput],
    params: &ModelParams,
    config: &MoeConfig,
) -> Result<()> {
    config.validate()?;
    params.check(config)?;
    if batches.len() != config.world_size || routings.len() != config.world_size {
        return Err(LlepError::shape(format!(
            "{} batches and {} routings for world size {}",
            batches.len(),
            routings.len(),
            config.world_size
        )));
    }
    for (p, b) in batches.iter().enumerate() {
        if b.device_id != p {
            return Err(LlepError::shape(format!("batch {p} claims device {}", b.device_id)));
        }
        if b.tokens.cols() != config.d_model {
            return Err(LlepError::shape(format!("batch {p} has width {}", b.tokens.cols())));
        }
    }
    Ok(())
}

//! Weight gradients through the same exchange as the forward step.
//!
//! Each executing device accumulates `g * u (x) dh` for the rows it ran, then
//! ships the partial back to the expert's native device, which sums partials
//! in ascending device rank. Gradients therefore live only where the
//! weights are resident.

use std::collections::BTreeMap;

use crate::config::{ModelParams, MoeConfig, PlannerConfig, TokenBatch};
use crate::error::Result;
use crate::router::RouterOutput;
use crate::tensor::{add_scaled_outer, Matrix};

use super::engine::{expert_groups, index_packets, lookup, prepare, record_recv_dispatch, stage, WeightStore};
use super::metrics::{weight_elements, DeviceStepMetrics, Direction, Message, MessageKind, StepMetrics};
use super::reference::check_upstream;
use super::{map_devices, ExecMode, Method, PlannedStep};

/// Expert weight gradients, held by each expert's native device.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAccumulator {
    per_device: Vec<BTreeMap<usize, Matrix>>,
}

impl GradientAccumulator {
    pub fn device(&self, device: usize) -> &BTreeMap<usize, Matrix> {
        &self.per_device[device]
    }

    pub fn expert(&self, expert: usize) -> Option<&Matrix> {
        self.per_device.iter().find_map(|m| m.get(&expert))
    }

    /// All gradients in expert order.
    pub fn into_dense(self) -> Vec<Matrix> {
        let mut all: Vec<(usize, Matrix)> = self.per_device.into_iter().flatten().collect();
        all.sort_by_key(|(e, _)| *e);
        all.into_iter().map(|(_, m)| m).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub grads: GradientAccumulator,
    pub planned: PlannedStep,
    pub metrics: StepMetrics,
}

/// LLEP backward for the weight gradients with routing held fixed.
pub fn backward_weights(
    batches: &[TokenBatch],
    routings: &[RouterOutput],
    upstream: &[Matrix],
    params: &ModelParams,
    config: &MoeConfig,
    planner: &PlannerConfig,
    mode: ExecMode,
) -> Result<BackwardOutput> {
    planner.validate()?;
    backward_weights_with(Method::Llep, batches, routings, upstream, params, config, planner, mode)
}

/// Backward under an explicit method; `Method::Ep` gives the baseline.
#[allow(clippy::too_many_arguments)]
pub fn backward_weights_with(
    method: Method,
    batches: &[TokenBatch],
    routings: &[RouterOutput],
    upstream: &[Matrix],
    params: &ModelParams,
    config: &MoeConfig,
    planner: &PlannerConfig,
    mode: ExecMode,
) -> Result<BackwardOutput> {
    let prep = prepare(method, batches, routings, params, config, planner, mode)?;
    check_upstream(batches, upstream, config)?;
    let world = config.world_size;
    let k = config.top_k;

    let upstream_sorted: Vec<Matrix> = prep
        .dispatches
        .iter()
        .zip(upstream)
        .map(|(d, u)| {
            let token_of: Vec<usize> = d.permutation.iter().map(|&f| f / k).collect();
            u.gather_rows(&token_of)
        })
        .collect();
    let outboxes = stage(&prep, Some(&upstream_sorted), config, mode)?;
    let index = index_packets(&outboxes);

    let partials = map_devices(world, mode, |dst| {
        let mut m = DeviceStepMetrics {
            device: dst,
            ..Default::default()
        };
        // The weights themselves are not needed for dW, but an executing
        // device holds them all the same.
        let store = WeightStore::import(dst, &prep, params, config, &mut m);
        let mut out = Vec::new();
        for (expert, group) in expert_groups(&prep.schedule.recvs[dst]) {
            store.get(expert)?;
            let mut acc = Matrix::zeros(config.d_model, config.d_hidden);
            let mut rows = 0;
            for r in group {
                let p = lookup(&index, r)?;
                record_recv_dispatch(&mut m, p, dst);
                let dh = p.upstream.as_ref().expect("backward packets carry upstream rows");
                for (i, &g) in p.gates.iter().enumerate() {
                    add_scaled_outer(&mut acc, g, p.tokens.row(i), dh.row(i));
                }
                rows += p.rows();
            }
            m.gemms.push(super::GemmRecord { expert, rows });
            let native = config.native_device(expert);
            if native != dst {
                m.messages.push(Message {
                    kind: MessageKind::Gradient,
                    direction: Direction::Send,
                    peer: native,
                    expert: Some(expert),
                    rows: config.d_model,
                    elements: weight_elements(config),
                });
            }
            out.push((expert, acc));
        }
        Ok((out, m))
    })?;

    // partials arrive at each native device in ascending source rank
    let mut inbound: Vec<Vec<(usize, usize, &Matrix)>> = vec![Vec::new(); world];
    for (src, (pieces, _)) in partials.iter().enumerate() {
        for (expert, acc) in pieces {
            inbound[config.native_device(*expert)].push((*expert, src, acc));
        }
    }
    let reduced = map_devices(world, mode, |owner| {
        let mut grads = BTreeMap::new();
        let mut messages = Vec::new();
        for expert in config.native_experts(owner) {
            let mut total = Matrix::zeros(config.d_model, config.d_hidden);
            for &(_, src, acc) in inbound[owner].iter().filter(|(e, _, _)| *e == expert) {
                total.add_assign(acc)?;
                if src != owner {
                    messages.push(Message {
                        kind: MessageKind::Gradient,
                        direction: Direction::Recv,
                        peer: src,
                        expert: Some(expert),
                        rows: acc.rows(),
                        elements: acc.as_slice().len(),
                    });
                }
            }
            grads.insert(expert, total);
        }
        Ok((grads, messages))
    })?;

    let mut devices = Vec::with_capacity(world);
    let mut per_device = Vec::with_capacity(world);
    for (((_, staged), (_, mut m)), (grads, recv)) in outboxes.iter().zip(partials).zip(reduced) {
        m.messages.extend_from_slice(staged);
        m.messages.extend(recv);
        devices.push(m);
        per_device.push(grads);
    }
    let mut metrics = StepMetrics {
        config: *config,
        path: prep.planned.path,
        loads: prep.loads,
        weight_transfers: prep.planned.transfers.len(),
        devices,
    };
    metrics.normalize();
    Ok(BackwardOutput {
        grads: GradientAccumulator { per_device },
        planned: prep.planned,
        metrics,
    })
}

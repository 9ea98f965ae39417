use std::collections::{BTreeMap, HashMap};

use crate::config::{ModelParams, MoeConfig, PlannerConfig, TokenBatch};
use crate::error::{LlepError, Result};
use crate::planner::{gather_loads, materialize_send_schedule, DeviceSendSchedule, LoadMatrix, RecvSlice};
use crate::router::{combine_unsort, sort_reindex, RouterOutput, SortedDispatch};
use crate::tensor::Matrix;

use super::metrics::{
    combine_elements, weight_elements, DeviceStepMetrics, Direction, GemmRecord, Message, MessageKind, StepMetrics,
};
use super::{check_inputs, map_devices, plan_step, ExecMode, Method, PlannedStep, StepOutput};

/// Everything decided before any row leaves its device.
pub(crate) struct Prepared {
    pub dispatches: Vec<SortedDispatch>,
    pub loads: LoadMatrix,
    pub planned: PlannedStep,
    pub schedule: DeviceSendSchedule,
}

pub(crate) fn prepare(
    method: Method,
    batches: &[TokenBatch],
    routings: &[RouterOutput],
    params: &ModelParams,
    config: &MoeConfig,
    planner: &PlannerConfig,
    mode: ExecMode,
) -> Result<Prepared> {
    check_inputs(batches, routings, params, config)?;
    let dispatches = map_devices(config.world_size, mode, |p| {
        sort_reindex(&batches[p], &routings[p], config)
    })?;
    let counts: Vec<Vec<usize>> = dispatches.iter().map(|d| d.per_expert_counts.clone()).collect();
    let loads = gather_loads(&counts, config)?;
    let planned = plan_step(method, &loads, config, planner)?;
    let schedule = materialize_send_schedule(&planned.plan, &loads)?;
    Ok(Prepared {
        dispatches,
        loads,
        planned,
        schedule,
    })
}

/// One send slice in flight.
pub(crate) struct Packet {
    pub src: usize,
    pub expert: usize,
    pub local_start: usize,
    pub tokens: Matrix,
    pub gates: Vec<f64>,
    /// Upstream gradient rows, present only in the backward exchange.
    pub upstream: Option<Matrix>,
}

impl Packet {
    pub fn rows(&self) -> usize {
        self.tokens.rows()
    }

    pub fn elements(&self) -> usize {
        self.tokens.as_slice().len() + self.gates.len() + self.upstream.as_ref().map_or(0, |u| u.as_slice().len())
    }
}

/// Cuts each source's sorted slots into packets and records the sender side
/// of dispatch and weight traffic.
pub(crate) fn stage(
    prep: &Prepared,
    upstream_sorted: Option<&[Matrix]>,
    config: &MoeConfig,
    mode: ExecMode,
) -> Result<Vec<(Vec<Packet>, Vec<Message>)>> {
    map_devices(config.world_size, mode, |src| {
        let dispatch = &prep.dispatches[src];
        let mut packets = Vec::with_capacity(prep.schedule.sends[src].len());
        let mut messages = Vec::new();
        for s in &prep.schedule.sends[src] {
            let base = dispatch.expert_offsets[s.expert];
            let (lo, hi) = (base + s.local_start, base + s.local_end);
            let packet = Packet {
                src,
                expert: s.expert,
                local_start: s.local_start,
                tokens: dispatch.sorted_tokens.slice_rows(lo, hi),
                gates: dispatch.sorted_gates[lo..hi].to_vec(),
                upstream: upstream_sorted.map(|u| u[src].slice_rows(lo, hi)),
            };
            if s.dst != src {
                messages.push(Message {
                    kind: MessageKind::Dispatch,
                    direction: Direction::Send,
                    peer: s.dst,
                    expert: Some(s.expert),
                    rows: packet.rows(),
                    elements: packet.elements(),
                });
            }
            packets.push(packet);
        }
        for t in prep.planned.transfers.exports(src) {
            messages.push(Message {
                kind: MessageKind::Weights,
                direction: Direction::Send,
                peer: t.dst,
                expert: Some(t.expert),
                rows: config.d_model,
                elements: weight_elements(config),
            });
        }
        Ok((packets, messages))
    })
}

/// Packets addressed by `(src, expert, local_start)`, the key a receive slice carries.
pub(crate) fn index_packets(outboxes: &[(Vec<Packet>, Vec<Message>)]) -> HashMap<(usize, usize, usize), &Packet> {
    outboxes
        .iter()
        .flat_map(|(packets, _)| packets)
        .map(|p| ((p.src, p.expert, p.local_start), p))
        .collect()
}

/// Expert weights available on one device during a step: its resident
/// experts plus copies imported for this step only.
pub(crate) struct WeightStore<'a> {
    device: usize,
    params: &'a ModelParams,
    config: &'a MoeConfig,
    imported: BTreeMap<usize, Matrix>,
}

impl<'a> WeightStore<'a> {
    /// Receives the imports planned for `device` and records them.
    pub fn import(
        device: usize,
        prep: &Prepared,
        params: &'a ModelParams,
        config: &'a MoeConfig,
        metrics: &mut DeviceStepMetrics,
    ) -> Self {
        let mut imported = BTreeMap::new();
        for t in prep.planned.transfers.transfers.iter().filter(|t| t.dst == device) {
            let w = params.expert_weights[t.expert].clone();
            metrics.messages.push(Message {
                kind: MessageKind::Weights,
                direction: Direction::Recv,
                peer: t.src,
                expert: Some(t.expert),
                rows: w.rows(),
                elements: w.as_slice().len(),
            });
            metrics.imports.push(t.expert);
            imported.insert(t.expert, w);
        }
        Self {
            device,
            params,
            config,
            imported,
        }
    }

    pub fn get(&self, expert: usize) -> Result<&Matrix> {
        if self.config.native_device(expert) == self.device {
            return Ok(&self.params.expert_weights[expert]);
        }
        self.imported.get(&expert).ok_or_else(|| {
            LlepError::PlanInconsistent(format!(
                "device {} executes expert {expert} without its weights",
                self.device
            ))
        })
    }
}

/// Receive slices of one destination grouped by expert, each group in
/// global token order.
pub(crate) fn expert_groups(recvs: &[RecvSlice]) -> Vec<(usize, &[RecvSlice])> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=recvs.len() {
        if i == recvs.len() || recvs[i].expert != recvs[start].expert {
            out.push((recvs[start].expert, &recvs[start..i]));
            start = i;
        }
    }
    out
}

pub(crate) fn lookup<'p>(index: &HashMap<(usize, usize, usize), &'p Packet>, r: &RecvSlice) -> Result<&'p Packet> {
    index
        .get(&(r.src, r.expert, r.local_start))
        .copied()
        .ok_or_else(|| LlepError::PlanInconsistent(format!("no packet for expert {} from {}", r.expert, r.src)))
}

pub(crate) fn record_recv_dispatch(metrics: &mut DeviceStepMetrics, packet: &Packet, dst: usize) {
    if packet.src != dst {
        metrics.messages.push(Message {
            kind: MessageKind::Dispatch,
            direction: Direction::Recv,
            peer: packet.src,
            expert: Some(packet.expert),
            rows: packet.rows(),
            elements: packet.elements(),
        });
    }
}

/// Gated expert output for one source slice, on its way home.
struct ReturnPiece {
    src: usize,
    dst: usize,
    expert: usize,
    local_start: usize,
    rows: Matrix,
}

pub(crate) fn forward_step(
    method: Method,
    batches: &[TokenBatch],
    routings: &[RouterOutput],
    params: &ModelParams,
    config: &MoeConfig,
    planner: &PlannerConfig,
    mode: ExecMode,
) -> Result<StepOutput> {
    let prep = prepare(method, batches, routings, params, config, planner, mode)?;
    let world = config.world_size;

    let outboxes = stage(&prep, None, config, mode)?;
    let index = index_packets(&outboxes);

    let computed = map_devices(world, mode, |dst| {
        let mut m = DeviceStepMetrics {
            device: dst,
            ..Default::default()
        };
        let store = WeightStore::import(dst, &prep, params, config, &mut m);
        let mut returns = Vec::new();
        for (expert, group) in expert_groups(&prep.schedule.recvs[dst]) {
            let packets = group.iter().map(|r| lookup(&index, r)).collect::<Result<Vec<_>>>()?;
            let parts: Vec<Matrix> = packets.iter().map(|p| p.tokens.clone()).collect();
            let stacked = Matrix::vstack(&parts, config.d_model)?;
            let mut out = stacked.matmul(store.get(expert)?)?;
            let gates = packets.iter().flat_map(|p| p.gates.iter().copied());
            for (r, g) in gates.enumerate() {
                out.row_mut(r).iter_mut().for_each(|v| *v *= g);
            }
            m.gemms.push(GemmRecord {
                expert,
                rows: out.rows(),
            });
            let mut cursor = 0;
            for p in packets {
                record_recv_dispatch(&mut m, p, dst);
                let rows = out.slice_rows(cursor, cursor + p.rows());
                cursor += p.rows();
                if p.src != dst {
                    m.messages.push(Message {
                        kind: MessageKind::Combine,
                        direction: Direction::Send,
                        peer: p.src,
                        expert: Some(expert),
                        rows: rows.rows(),
                        elements: combine_elements(rows.rows(), config),
                    });
                }
                returns.push(ReturnPiece {
                    src: p.src,
                    dst,
                    expert,
                    local_start: p.local_start,
                    rows,
                });
            }
        }
        // Imported weights go out of scope here.
        Ok((returns, m))
    })?;

    let mut inbound: Vec<Vec<&ReturnPiece>> = vec![Vec::new(); world];
    for (returns, _) in &computed {
        for piece in returns {
            inbound[piece.src].push(piece);
        }
    }

    let combined = map_devices(world, mode, |src| {
        let dispatch = &prep.dispatches[src];
        let mut sorted_out = Matrix::zeros(dispatch.num_slots(), config.d_hidden);
        let mut messages = Vec::new();
        for piece in &inbound[src] {
            let base = dispatch.expert_offsets[piece.expert] + piece.local_start;
            for r in 0..piece.rows.rows() {
                sorted_out.row_mut(base + r).copy_from_slice(piece.rows.row(r));
            }
            if piece.dst != src {
                messages.push(Message {
                    kind: MessageKind::Combine,
                    direction: Direction::Recv,
                    peer: piece.dst,
                    expert: Some(piece.expert),
                    rows: piece.rows.rows(),
                    elements: piece.rows.as_slice().len(),
                });
            }
        }
        Ok((combine_unsort(&sorted_out, dispatch)?, messages))
    })?;

    let mut devices = Vec::with_capacity(world);
    let mut outputs = Vec::with_capacity(world);
    for (((_, staged), (_, mut m)), (out, recv)) in outboxes.iter().zip(computed).zip(combined) {
        m.messages.extend_from_slice(staged);
        m.messages.extend(recv);
        devices.push(m);
        outputs.push(out);
    }
    let mut metrics = StepMetrics {
        config: *config,
        path: prep.planned.path,
        loads: prep.loads,
        weight_transfers: prep.planned.transfers.len(),
        devices,
    };
    metrics.normalize();
    Ok(StepOutput {
        outputs,
        planned: prep.planned,
        schedule: prep.schedule,
        metrics,
    })
}

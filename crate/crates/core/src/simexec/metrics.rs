//! What one simulated step did on each device: GEMMs run, messages moved,
//! weights imported. The cost model consumes these.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::MoeConfig;
use crate::planner::{DeviceSendSchedule, LoadMatrix, WeightTransferPlan};

use super::PathTaken;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    /// Token rows plus their gates, source to executing device.
    Dispatch,
    /// Gated expert outputs, executing device back to source.
    Combine,
    /// Expert weight copy, native device to importer.
    Weights,
    /// Partial weight gradient, executing device back to native device.
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Send,
    Recv,
}

/// One point-to-point transfer as seen by one endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    pub direction: Direction,
    pub peer: usize,
    /// Set for per-expert transfers; `None` for a packed exchange buffer.
    pub expert: Option<usize>,
    pub rows: usize,
    /// Payload size in scalars; bytes are `elements * dtype_bytes`.
    pub elements: usize,
}

impl Message {
    pub fn bytes(&self, dtype_bytes: usize) -> usize {
        self.elements * dtype_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmRecord {
    pub expert: usize,
    pub rows: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceStepMetrics {
    pub device: usize,
    /// One grouped-GEMM entry per expert executed here, ascending by expert.
    pub gemms: Vec<GemmRecord>,
    pub messages: Vec<Message>,
    /// Foreign experts whose weights were imported for this step.
    pub imports: Vec<usize>,
}

impl DeviceStepMetrics {
    pub fn tokens_executed(&self) -> usize {
        self.gemms.iter().map(|g| g.rows).sum()
    }

    pub fn bytes_moved(&self, dtype_bytes: usize) -> usize {
        self.messages.iter().map(|m| m.bytes(dtype_bytes)).sum()
    }

    /// Packs exchange slices per peer and puts everything in canonical
    /// order, so metrics recorded in different sequences compare equal.
    pub fn normalize(&mut self) {
        pack_exchanges(&mut self.messages);
        self.messages.sort();
        self.gemms.sort_by_key(|g| g.expert);
        self.imports.sort_unstable();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub config: MoeConfig,
    pub path: PathTaken,
    pub loads: LoadMatrix,
    pub weight_transfers: usize,
    pub devices: Vec<DeviceStepMetrics>,
}

impl StepMetrics {
    pub fn normalize(&mut self) {
        self.devices.iter_mut().for_each(DeviceStepMetrics::normalize);
    }

    pub fn total_rows(&self, kind: MessageKind, direction: Direction) -> usize {
        self.devices
            .iter()
            .flat_map(|d| &d.messages)
            .filter(|m| m.kind == kind && m.direction == direction)
            .map(|m| m.rows)
            .sum()
    }
}

/// An exchange phase ships one packed buffer per peer, so slice records of
/// the same kind, direction and peer merge into one message.
pub(crate) fn pack_exchanges(messages: &mut Vec<Message>) {
    let mut packed: BTreeMap<(MessageKind, Direction, usize), Message> = BTreeMap::new();
    messages.retain(|m| {
        if !matches!(m.kind, MessageKind::Dispatch | MessageKind::Combine) {
            return true;
        }
        let e = packed.entry((m.kind, m.direction, m.peer)).or_insert(Message {
            expert: None,
            rows: 0,
            elements: 0,
            ..*m
        });
        e.rows += m.rows;
        e.elements += m.elements;
        false
    });
    messages.extend(packed.into_values());
}

pub(crate) fn dispatch_elements(rows: usize, config: &MoeConfig) -> usize {
    // token row plus its gate scalar
    rows * (config.d_model + 1)
}

pub(crate) fn combine_elements(rows: usize, config: &MoeConfig) -> usize {
    rows * config.d_hidden
}

pub(crate) fn weight_elements(config: &MoeConfig) -> usize {
    config.d_model * config.d_hidden
}

/// Forward-step metrics derived from counts alone, without moving any data.
/// Matches what the numeric executor records for the same schedule.
pub fn schedule_metrics(
    config: &MoeConfig,
    path: PathTaken,
    loads: &LoadMatrix,
    schedule: &DeviceSendSchedule,
    transfers: &WeightTransferPlan,
) -> StepMetrics {
    let world = config.world_size;
    let mut devices: Vec<DeviceStepMetrics> = (0..world)
        .map(|device| DeviceStepMetrics {
            device,
            ..Default::default()
        })
        .collect();

    for (src, slices) in schedule.sends.iter().enumerate() {
        for s in slices.iter().filter(|s| s.dst != src) {
            let rows = s.len();
            let pair = [
                (src, s.dst, MessageKind::Dispatch, dispatch_elements(rows, config)),
                (s.dst, src, MessageKind::Combine, combine_elements(rows, config)),
            ];
            for (from, to, kind, elements) in pair {
                devices[from].messages.push(Message {
                    kind,
                    direction: Direction::Send,
                    peer: to,
                    expert: Some(s.expert),
                    rows,
                    elements,
                });
                devices[to].messages.push(Message {
                    kind,
                    direction: Direction::Recv,
                    peer: from,
                    expert: Some(s.expert),
                    rows,
                    elements,
                });
            }
        }
    }
    for t in &transfers.transfers {
        let elements = weight_elements(config);
        devices[t.src].messages.push(Message {
            kind: MessageKind::Weights,
            direction: Direction::Send,
            peer: t.dst,
            expert: Some(t.expert),
            rows: config.d_model,
            elements,
        });
        devices[t.dst].messages.push(Message {
            kind: MessageKind::Weights,
            direction: Direction::Recv,
            peer: t.src,
            expert: Some(t.expert),
            rows: config.d_model,
            elements,
        });
        devices[t.dst].imports.push(t.expert);
    }
    for (d, dev) in devices.iter_mut().enumerate() {
        dev.gemms = schedule
            .executed(d)
            .into_iter()
            .map(|(expert, rows)| GemmRecord { expert, rows })
            .collect();
    }
    let mut metrics = StepMetrics {
        config: *config,
        path,
        loads: loads.clone(),
        weight_transfers: transfers.len(),
        devices,
    };
    metrics.normalize();
    metrics
}

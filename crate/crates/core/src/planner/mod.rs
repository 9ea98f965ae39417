//! Least-loaded assignment of expert token ranges to devices.
//!
//! The planner works purely on token counts. Every simulated device runs it
//! on the same gathered `P x N` count matrix, so it has to be deterministic:
//! all sorts are stable and all ties go to the lower id.

mod check;
mod lla;
mod schedule;

use serde::{Deserialize, Serialize};

use crate::config::MoeConfig;
use crate::error::{LlepError, Result};

pub use check::{check_plan, Violation};
pub use lla::{lla_plan, llas_spill, SpillState};
pub use schedule::{materialize_send_schedule, DeviceSendSchedule, RecvSlice, SendSlice};

/// Routed-slot counts, one row per device, plus their column sums.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadMatrix {
    counts: Vec<Vec<usize>>,
    global_loads: Vec<usize>,
}

impl LoadMatrix {
    pub fn from_rows(counts: Vec<Vec<usize>>) -> Result<Self> {
        let n = counts.first().map_or(0, Vec::len);
        if let Some((p, row)) = counts.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(LlepError::shape(format!(
                "device {p} reports {} experts, device 0 reports {n}",
                row.len()
            )));
        }
        let mut global_loads = vec![0usize; n];
        for row in &counts {
            for (g, c) in global_loads.iter_mut().zip(row) {
                *g += c;
            }
        }
        Ok(Self { counts, global_loads })
    }

    pub fn world_size(&self) -> usize {
        self.counts.len()
    }

    pub fn n_experts(&self) -> usize {
        self.global_loads.len()
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn count(&self, device: usize, expert: usize) -> usize {
        self.counts[device][expert]
    }

    /// `l`: total slots routed to each expert across all devices.
    pub fn global_loads(&self) -> &[usize] {
        &self.global_loads
    }

    pub fn total(&self) -> usize {
        self.global_loads.iter().sum()
    }
}

/// Stacks the per-device count vectors (the simulated all-gather).
pub fn gather_loads(per_device_counts: &[Vec<usize>], config: &MoeConfig) -> Result<LoadMatrix> {
    if per_device_counts.len() != config.world_size {
        return Err(LlepError::shape(format!(
            "{} count vectors for world size {}",
            per_device_counts.len(),
            config.world_size
        )));
    }
    if let Some(row) = per_device_counts.iter().find(|r| r.len() != config.n_experts) {
        return Err(LlepError::shape(format!(
            "count vector of length {} for {} experts",
            row.len(),
            config.n_experts
        )));
    }
    LoadMatrix::from_rows(per_device_counts.to_vec())
}

/// `max(l) / mean(l)`; an all-zero load vector counts as perfectly balanced.
pub fn imbalance_ratio(loads: &[usize]) -> f64 {
    let total: usize = loads.iter().sum();
    if loads.is_empty() || total == 0 {
        return 1.0;
    }
    let max = *loads.iter().max().unwrap() as f64;
    max / (total as f64 / loads.len() as f64)
}

pub fn is_balanced(loads: &[usize], lambda: f64) -> bool {
    imbalance_ratio(loads) < lambda
}

/// A half-open range `[start, end)` of an expert's global token order
/// executed on `device`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub device: usize,
    pub start: usize,
    pub end: usize,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentPlan {
    /// Chunks of each expert in ascending offset order.
    pub per_expert: Vec<Vec<Chunk>>,
    /// Tokens each device ends up executing.
    pub assigned_load: Vec<usize>,
    /// Per-device token capacity `alpha * total / P`.
    pub capacity: f64,
    /// How many times the spill loop had to force-assign a remainder.
    pub force_count: usize,
}

impl AssignmentPlan {
    /// Plain expert parallelism: every expert runs whole on its native device.
    /// `capacity` is reported at `alpha = 1`.
    pub fn native(loads: &[usize], config: &MoeConfig) -> Self {
        let mut assigned_load = vec![0; config.world_size];
        let per_expert = loads
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                if l == 0 {
                    return Vec::new();
                }
                let device = config.native_device(i);
                assigned_load[device] += l;
                vec![Chunk {
                    device,
                    start: 0,
                    end: l,
                }]
            })
            .collect();
        let total: usize = loads.iter().sum();
        Self {
            per_expert,
            assigned_load,
            capacity: total as f64 / config.world_size as f64,
            force_count: 0,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.per_expert.len()
    }

    /// Whether every chunk sits on its expert's native device.
    pub fn is_native(&self, config: &MoeConfig) -> bool {
        self.per_expert
            .iter()
            .enumerate()
            .all(|(i, chunks)| chunks.iter().all(|c| c.device == config.native_device(i)))
    }

    /// Flattened `(expert, chunk)` records in expert order.
    pub fn records(&self) -> impl Iterator<Item = (usize, Chunk)> + '_ {
        self.per_expert
            .iter()
            .enumerate()
            .flat_map(|(i, chunks)| chunks.iter().map(move |c| (i, *c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeightTransfer {
    pub expert: usize,
    pub src: usize,
    pub dst: usize,
}

/// Expert weights that must be copied from their native device before the
/// grouped GEMMs run. Sorted by `(expert, dst)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightTransferPlan {
    pub transfers: Vec<WeightTransfer>,
}

impl WeightTransferPlan {
    pub fn from_plan(plan: &AssignmentPlan, config: &MoeConfig) -> Self {
        let mut transfers: Vec<WeightTransfer> = plan
            .records()
            .filter_map(|(expert, c)| {
                let src = config.native_device(expert);
                (c.device != src).then_some(WeightTransfer {
                    expert,
                    src,
                    dst: c.device,
                })
            })
            .collect();
        transfers.sort_by_key(|t| (t.expert, t.dst));
        transfers.dedup();
        Self { transfers }
    }

    pub fn is_empty(&self) -> bool {
        self.transfers.is_empty()
    }

    pub fn len(&self) -> usize {
        self.transfers.len()
    }

    /// Experts imported by `device`, ascending.
    pub fn imports(&self, device: usize) -> Vec<usize> {
        self.transfers
            .iter()
            .filter(|t| t.dst == device)
            .map(|t| t.expert)
            .collect()
    }

    /// Transfers sourced from `device`.
    pub fn exports(&self, device: usize) -> impl Iterator<Item = &WeightTransfer> {
        self.transfers.iter().filter(move |t| t.src == device)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, p: usize) -> MoeConfig {
        MoeConfig::new(n, 1, 1, 1, p).unwrap()
    }

    #[test]
    fn gather_sums_columns() {
        let l = gather_loads(&[vec![1, 0], vec![0, 1]], &cfg(2, 2)).unwrap();
        assert_eq!(l.global_loads(), &[1, 1]);
        let l = gather_loads(&[vec![6, 0, 0, 0], vec![4, 0, 0, 0]], &cfg(4, 2)).unwrap();
        assert_eq!(l.global_loads(), &[10, 0, 0, 0]);
        let l = gather_loads(&[vec![3, 1, 4, 1]], &cfg(4, 1)).unwrap();
        assert_eq!(l.global_loads(), &[3, 1, 4, 1]);
    }

    #[test]
    fn gather_rejects_bad_lengths() {
        assert!(gather_loads(&[vec![1, 0]], &cfg(2, 2)).is_err());
        assert!(gather_loads(&[vec![1, 0], vec![1]], &cfg(2, 2)).is_err());
    }

    #[test]
    fn imbalance_ratios() {
        assert_eq!(imbalance_ratio(&[5, 5, 5, 5]), 1.0);
        assert_eq!(imbalance_ratio(&[10, 0, 0, 0]), 4.0);
        assert_eq!(imbalance_ratio(&[0, 0]), 1.0);
    }

    #[test]
    fn balance_threshold() {
        assert!(is_balanced(&[7; 8], 1.3));
        assert!(!is_balanced(&[10, 0, 0, 0], 1.3));
        // 13 / 10.75
        assert!((imbalance_ratio(&[13, 10, 10, 10]) - 1.2093).abs() < 1e-4);
        assert!(is_balanced(&[13, 10, 10, 10], 1.3));
    }

    #[test]
    fn native_plan_and_empty_transfers() {
        let c = cfg(4, 2);
        let plan = AssignmentPlan::native(&[3, 0, 2, 5], &c);
        assert_eq!(plan.assigned_load, vec![3, 7]);
        assert!(plan.per_expert[1].is_empty());
        assert!(plan.is_native(&c));
        assert!(WeightTransferPlan::from_plan(&plan, &c).is_empty());
    }
}

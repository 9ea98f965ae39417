//! Independent validation of planner output. Used by the fuzz suites and the
//! `verify` command; it only looks at the plan, never at planner internals
//! other than the reported force count.

use std::collections::BTreeSet;
use std::fmt;

use crate::config::MoeConfig;

use super::{AssignmentPlan, WeightTransfer, WeightTransferPlan};

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Chunk sizes of an expert do not sum to its load.
    Coverage { expert: usize, planned: usize, load: usize },
    /// Chunks are empty, do not start at 0, or leave gaps/overlaps.
    Contiguity { expert: usize },
    /// Reported per-device loads disagree with the chunks, or do not sum to the total.
    Conservation,
    /// Native device had whole-token room but the first chunk went elsewhere.
    NativeFirst { expert: usize },
    /// A device exceeds `ceil(capacity)` although nothing was force-assigned.
    Capacity { device: usize, load: usize },
    /// Transfer set differs from the chunks placed on non-native devices.
    WeightPlan,
    /// Plan dimensions do not match the config.
    Shape,
}

impl Violation {
    pub fn name(&self) -> &'static str {
        match self {
            Violation::Coverage { .. } => "coverage",
            Violation::Contiguity { .. } => "contiguity",
            Violation::Conservation => "conservation",
            Violation::NativeFirst { .. } => "native-first",
            Violation::Capacity { .. } => "capacity",
            Violation::WeightPlan => "weight-plan-soundness",
            Violation::Shape => "shape",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Coverage { expert, planned, load } => {
                write!(f, "coverage: expert {expert} planned {planned} of {load}")
            }
            Violation::Contiguity { expert } => write!(f, "contiguity: expert {expert}"),
            Violation::NativeFirst { expert } => write!(f, "native-first: expert {expert}"),
            Violation::Capacity { device, load } => write!(f, "capacity: device {device} holds {load}"),
            other => f.write_str(other.name()),
        }
    }
}

/// Checks coverage, contiguity, conservation, native-first, conditional
/// capacity and weight-plan soundness. Returns every violation found.
pub fn check_plan(
    loads: &[usize],
    config: &MoeConfig,
    plan: &AssignmentPlan,
    transfers: &WeightTransferPlan,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let world = config.world_size;
    if plan.per_expert.len() != loads.len() || plan.assigned_load.len() != world {
        out.push(Violation::Shape);
        return out;
    }

    let mut per_device = vec![0usize; world];
    for (expert, chunks) in plan.per_expert.iter().enumerate() {
        let planned: usize = chunks.iter().map(|c| c.end.saturating_sub(c.start)).sum();
        if planned != loads[expert] {
            out.push(Violation::Coverage {
                expert,
                planned,
                load: loads[expert],
            });
        }
        let mut cursor = 0;
        let mut contiguous = true;
        for c in chunks {
            if c.start != cursor || c.end <= c.start || c.device >= world {
                contiguous = false;
                break;
            }
            cursor = c.end;
            per_device[c.device] += c.len();
        }
        if !contiguous {
            out.push(Violation::Contiguity { expert });
        }
    }

    let total: usize = loads.iter().sum();
    if per_device != plan.assigned_load || plan.assigned_load.iter().sum::<usize>() != total {
        out.push(Violation::Conservation);
    }

    // Replay the occupancy bookkeeping from the plan itself.
    let mut order: Vec<usize> = (0..loads.len()).collect();
    order.sort_by(|&a, &b| loads[b].cmp(&loads[a]));
    let mut pending = vec![0usize; world];
    for (i, &l) in loads.iter().enumerate() {
        pending[config.native_device(i)] += l;
    }
    let mut assigned = vec![0usize; world];
    for &i in &order {
        let e = loads[i];
        if e == 0 {
            continue;
        }
        let ng = config.native_device(i);
        pending[ng] = pending[ng].saturating_sub(e);
        let room = (plan.capacity - assigned[ng] as f64 - pending[ng] as f64).floor();
        let first = plan.per_expert[i].first();
        if room > 0.0 && !matches!(first, Some(c) if c.device == ng && c.start == 0) {
            out.push(Violation::NativeFirst { expert: i });
        }
        for c in &plan.per_expert[i] {
            if c.device < world {
                assigned[c.device] += c.end.saturating_sub(c.start);
            }
        }
    }

    if plan.force_count == 0 {
        let cap = plan.capacity.ceil();
        for (device, &load) in plan.assigned_load.iter().enumerate() {
            if load as f64 > cap {
                out.push(Violation::Capacity { device, load });
            }
        }
    }

    let expected: BTreeSet<WeightTransfer> = plan
        .records()
        .filter(|(i, c)| c.device != config.native_device(*i))
        .map(|(expert, c)| WeightTransfer {
            expert,
            src: config.native_device(expert),
            dst: c.device,
        })
        .collect();
    let actual: BTreeSet<WeightTransfer> = transfers.transfers.iter().copied().collect();
    if expected != actual || actual.len() != transfers.transfers.len() {
        out.push(Violation::WeightPlan);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PlannerConfig;
    use crate::planner::lla_plan;

    #[test]
    fn clean_plan_has_no_violations() {
        let c = MoeConfig::new(4, 1, 1, 1, 2).unwrap();
        let p = PlannerConfig {
            alpha: 1.0,
            min_chunk: 4,
            lambda: 1.3,
        };
        let loads = [9, 0, 4, 0];
        let (plan, w) = lla_plan(&loads, &c, &p).unwrap();
        assert!(check_plan(&loads, &c, &plan, &w).is_empty());
    }

    #[test]
    fn flipped_boundary_is_caught() {
        let c = MoeConfig::new(4, 1, 1, 1, 2).unwrap();
        let p = PlannerConfig {
            alpha: 1.0,
            min_chunk: 1,
            lambda: 1.3,
        };
        let loads = [10, 0, 0, 0];
        let (mut plan, w) = lla_plan(&loads, &c, &p).unwrap();
        plan.per_expert[0][0].end -= 1;
        let v = check_plan(&loads, &c, &plan, &w);
        assert!(v.iter().any(|v| v.name() == "contiguity"), "{v:?}");
    }

    #[test]
    fn missing_transfer_is_caught() {
        let c = MoeConfig::new(4, 1, 1, 1, 2).unwrap();
        let p = PlannerConfig {
            alpha: 1.0,
            min_chunk: 1,
            lambda: 1.3,
        };
        let loads = [10, 0, 0, 0];
        let (plan, _) = lla_plan(&loads, &c, &p).unwrap();
        let v = check_plan(&loads, &c, &plan, &WeightTransferPlan::default());
        assert_eq!(v, vec![Violation::WeightPlan]);
    }
}

use crate::config::{MoeConfig, PlannerConfig};
use crate::error::{LlepError, Result};

use super::{AssignmentPlan, Chunk, WeightTransferPlan};

/// Mutable bookkeeping shared by the assignment loop and the spill routine.
#[derive(Debug, Clone, PartialEq)]
pub struct SpillState {
    /// Tokens already committed to each device.
    pub assigned: Vec<usize>,
    /// Native load of each device not yet processed.
    pub pending: Vec<usize>,
    /// `m_alpha`.
    pub capacity: f64,
    pub min_chunk: usize,
    pub force_count: usize,
}

impl SpillState {
    /// Whole tokens `device` can still take before reaching capacity. May be
    /// zero or negative.
    pub fn floor_available(&self, device: usize) -> i64 {
        (self.capacity - (self.assigned[device] + self.pending[device]) as f64).floor() as i64
    }

    fn occupancy(&self, device: usize) -> usize {
        self.assigned[device] + self.pending[device]
    }
}

/// Spills `remaining` tokens of an expert native to `native`, starting at
/// global offset `offset`, onto the least-occupied other devices.
///
/// A candidate is skipped when it has no whole token of room, or when its
/// chunk would be smaller than `min_chunk` without finishing the expert. If
/// a pass skips every candidate, the whole remainder goes to the
/// least-occupied candidate even if that overshoots capacity.
pub fn llas_spill(
    state: &mut SpillState,
    native: usize,
    mut remaining: usize,
    mut offset: usize,
    chunks: &mut Vec<Chunk>,
) -> Result<()> {
    let world = state.assigned.len();
    if remaining > 0 && world < 2 {
        return Err(LlepError::SpillWorldSizeOne);
    }
    let mut candidates: Vec<usize> = (0..world).filter(|&d| d != native).collect();
    while remaining > 0 {
        // Stable sort keeps lower ids first among equal occupancy.
        candidates.sort_by_key(|&d| state.occupancy(d));
        let mut accepted = false;
        for &o in &candidates {
            let avail = state.floor_available(o);
            if avail <= 0 {
                continue;
            }
            let c = remaining.min(avail as usize);
            if c < state.min_chunk && remaining > c {
                continue;
            }
            chunks.push(Chunk {
                device: o,
                start: offset,
                end: offset + c,
            });
            state.assigned[o] += c;
            remaining -= c;
            offset += c;
            accepted = true;
            break;
        }
        if !accepted {
            let o = candidates[0];
            chunks.push(Chunk {
                device: o,
                start: offset,
                end: offset + remaining,
            });
            state.assigned[o] += remaining;
            state.force_count += 1;
            remaining = 0;
        }
    }
    Ok(())
}

/// Least-loaded assignment over global expert loads `loads`.
///
/// Experts are visited heaviest first. Each one fills its native device up
/// to capacity and spills the rest through [`llas_spill`]. Zero-load experts
/// get no chunks.
pub fn lla_plan(
    loads: &[usize],
    config: &MoeConfig,
    planner: &PlannerConfig,
) -> Result<(AssignmentPlan, WeightTransferPlan)> {
    config.validate()?;
    planner.validate()?;
    if loads.len() != config.n_experts {
        return Err(LlepError::shape(format!(
            "{} loads for {} experts",
            loads.len(),
            config.n_experts
        )));
    }
    let world = config.world_size;
    let total: usize = loads.iter().sum();

    let mut order: Vec<usize> = (0..loads.len()).collect();
    order.sort_by(|&a, &b| loads[b].cmp(&loads[a]));

    let mut native_load = vec![0usize; world];
    for (i, &l) in loads.iter().enumerate() {
        native_load[config.native_device(i)] += l;
    }
    let mut state = SpillState {
        assigned: vec![0; world],
        pending: native_load,
        capacity: planner.alpha * total as f64 / world as f64,
        min_chunk: planner.min_chunk,
        force_count: 0,
    };

    let mut per_expert = vec![Vec::new(); loads.len()];
    for &i in &order {
        let e = loads[i];
        if e == 0 {
            continue;
        }
        let ng = config.native_device(i);
        state.pending[ng] -= e;
        let na = state.capacity - state.assigned[ng] as f64 - state.pending[ng] as f64;
        let mut chunks = Vec::new();
        if na >= e as f64 {
            chunks.push(Chunk {
                device: ng,
                start: 0,
                end: e,
            });
            state.assigned[ng] += e;
        } else {
            let native_take = if na > 0.0 { (na.floor() as usize).min(e) } else { 0 };
            if native_take > 0 {
                chunks.push(Chunk {
                    device: ng,
                    start: 0,
                    end: native_take,
                });
                state.assigned[ng] += native_take;
            }
            llas_spill(&mut state, ng, e - native_take, native_take, &mut chunks)?;
        }
        per_expert[i] = chunks;
    }

    let plan = AssignmentPlan {
        per_expert,
        assigned_load: state.assigned,
        capacity: state.capacity,
        force_count: state.force_count,
    };
    let transfers = WeightTransferPlan::from_plan(&plan, config);
    Ok((plan, transfers))
}

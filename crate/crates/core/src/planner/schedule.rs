//! Maps plan chunks (global token offsets) onto each source device's locally
//! sorted slots.
//!
//! An expert's global token order is the concatenation of the devices'
//! contributions in ascending rank, each in its own stable sorted order. So
//! device `p`'s tokens for expert `i` occupy the global range
//! `[sum_{q<p} counts[q][i], sum_{q<=p} counts[q][i])`.

use serde::{Deserialize, Serialize};

use crate::error::{LlepError, Result};

use super::{AssignmentPlan, LoadMatrix};

/// Rows `local_start..local_end` of a source device's slots for `expert`,
/// bound for `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendSlice {
    pub expert: usize,
    pub dst: usize,
    pub local_start: usize,
    pub local_end: usize,
}

/// The same slice seen from the receiving side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecvSlice {
    pub expert: usize,
    pub src: usize,
    pub local_start: usize,
    pub local_end: usize,
}

impl SendSlice {
    pub fn len(&self) -> usize {
        self.local_end - self.local_start
    }

    pub fn is_empty(&self) -> bool {
        self.local_end == self.local_start
    }
}

impl RecvSlice {
    pub fn len(&self) -> usize {
        self.local_end - self.local_start
    }

    pub fn is_empty(&self) -> bool {
        self.local_end == self.local_start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSendSchedule {
    /// Per source device, in (expert, global offset) order.
    pub sends: Vec<Vec<SendSlice>>,
    /// Per destination device, in (expert, global offset) order. Concatenating
    /// the slices of one expert reproduces the global order of the rows that
    /// destination executes.
    pub recvs: Vec<Vec<RecvSlice>>,
    /// Per destination device: non-native experts it executes, ascending.
    pub foreign: Vec<Vec<usize>>,
}

impl DeviceSendSchedule {
    /// Rows of `expert` that `dst` receives (including from itself).
    pub fn destination_total(&self, expert: usize, dst: usize) -> usize {
        self.recvs[dst]
            .iter()
            .filter(|r| r.expert == expert)
            .map(RecvSlice::len)
            .sum()
    }

    /// Experts executed on `dst` with their row totals, ascending by expert.
    pub fn executed(&self, dst: usize) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for r in &self.recvs[dst] {
            match out.last_mut() {
                Some((e, rows)) if *e == r.expert => *rows += r.len(),
                _ => out.push((r.expert, r.len())),
            }
        }
        out
    }
}

/// Intersects every plan chunk with every source device's sub-range of the
/// expert's global order.
pub fn materialize_send_schedule(plan: &AssignmentPlan, loads: &LoadMatrix) -> Result<DeviceSendSchedule> {
    let world = loads.world_size();
    let n = loads.n_experts();
    if plan.n_experts() != n || plan.assigned_load.len() != world {
        return Err(LlepError::PlanInconsistent(format!(
            "plan covers {} experts / {} devices, loads cover {n} / {world}",
            plan.n_experts(),
            plan.assigned_load.len()
        )));
    }
    if world == 0 {
        return Ok(DeviceSendSchedule {
            sends: Vec::new(),
            recvs: Vec::new(),
            foreign: Vec::new(),
        });
    }
    let m = n / world;
    let mut sends = vec![Vec::new(); world];
    let mut recvs = vec![Vec::new(); world];
    let mut foreign: Vec<Vec<usize>> = vec![Vec::new(); world];

    for (expert, chunks) in plan.per_expert.iter().enumerate() {
        let planned: usize = chunks.iter().map(|c| c.len()).sum();
        let load = loads.global_loads()[expert];
        if planned != load {
            return Err(LlepError::PlanInconsistent(format!(
                "expert {expert}: chunks cover {planned} tokens, load is {load}"
            )));
        }
        let mut cursor = 0;
        for c in chunks {
            if c.start != cursor || c.end < c.start || c.device >= world {
                return Err(LlepError::PlanInconsistent(format!(
                    "expert {expert}: chunk {}..{} on device {} breaks contiguity",
                    c.start, c.end, c.device
                )));
            }
            cursor = c.end;
            if c.device != expert / m.max(1) && !foreign[c.device].contains(&expert) {
                foreign[c.device].push(expert);
            }
            let mut src_start = 0;
            for (src, row) in loads.counts().iter().enumerate() {
                let src_end = src_start + row[expert];
                let lo = c.start.max(src_start);
                let hi = c.end.min(src_end);
                if lo < hi {
                    sends[src].push(SendSlice {
                        expert,
                        dst: c.device,
                        local_start: lo - src_start,
                        local_end: hi - src_start,
                    });
                    recvs[c.device].push(RecvSlice {
                        expert,
                        src,
                        local_start: lo - src_start,
                        local_end: hi - src_start,
                    });
                }
                src_start = src_end;
            }
        }
    }
    for f in &mut foreign {
        f.sort_unstable();
    }
    Ok(DeviceSendSchedule { sends, recvs, foreign })
}

//! Analytic latency and peak-memory model over step metrics.
//!
//! Each device runs its GEMMs and messages back to back (no overlap). A GEMM
//! of `b` rows costs a launch plus `2bDH` flops at an efficiency that ramps
//! linearly from `eff_floor` at batch 1 to 1.0 at `eff_saturation_batch`.
//! A message costs a fixed latency plus bytes over link bandwidth.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LlepError, Result};
use crate::simexec::{PathTaken, StepMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Seconds per GEMM kernel launch.
    pub t_launch: f64,
    /// Flop/s at full efficiency.
    pub flops_rate: f64,
    pub eff_floor: f64,
    pub eff_saturation_batch: f64,
    /// Bytes/s per link.
    pub link_bandwidth: f64,
    /// Seconds per message.
    pub link_latency: f64,
    pub dtype_bytes: usize,
}

pub const DEFAULT_PROFILE: &str = "h200";

impl Default for CostParams {
    fn default() -> Self {
        Self::h200()
    }
}

impl CostParams {
    pub fn h200() -> Self {
        Self {
            t_launch: 5e-6,
            flops_rate: 9.9e14,
            eff_floor: 0.1,
            eff_saturation_batch: 4096.0,
            link_bandwidth: 4.5e11,
            link_latency: 1e-5,
            dtype_bytes: 2,
        }
    }

    /// Flops only: free launches and messages, constant efficiency. Device
    /// time becomes proportional to the rows it executes.
    pub fn compute_only() -> Self {
        Self {
            t_launch: 0.0,
            eff_floor: 1.0,
            link_bandwidth: f64::MAX,
            link_latency: 0.0,
            ..Self::h200()
        }
    }

    pub fn profile_names() -> &'static [&'static str] {
        &["h200", "compute-only"]
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "h200" => Ok(Self::h200()),
            "compute-only" => Ok(Self::compute_only()),
            other => Err(LlepError::UnknownProfile(other.to_string())),
        }
    }

    /// A named profile, or else a JSON file holding all fields.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::profile(name_or_path) {
            Ok(p) => Ok(p),
            Err(e) if !Path::new(name_or_path).is_file() => Err(e),
            Err(_) => Self::from_file(Path::new(name_or_path)),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| LlepError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let params: Self = serde_json::from_str(&text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(LlepError::InvalidCostParams(what.to_string()));
        if !(self.flops_rate.is_finite() && self.flops_rate > 0.0) {
            return bad("flops_rate must be finite and > 0");
        }
        if self.link_bandwidth.is_nan() || self.link_bandwidth <= 0.0 {
            return bad("link_bandwidth must be > 0");
        }
        if !(self.t_launch.is_finite() && self.t_launch >= 0.0) {
            return bad("t_launch must be finite and >= 0");
        }
        if !(self.link_latency.is_finite() && self.link_latency >= 0.0) {
            return bad("link_latency must be finite and >= 0");
        }
        if !(self.eff_floor > 0.0 && self.eff_floor <= 1.0) {
            return bad("eff_floor must be in (0, 1]");
        }
        if !(self.eff_saturation_batch.is_finite() && self.eff_saturation_batch > 0.0) {
            return bad("eff_saturation_batch must be finite and > 0");
        }
        if self.dtype_bytes == 0 {
            return bad("dtype_bytes must be >= 1");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("plain struct serializes"),
        ))
    }

    pub fn efficiency(&self, b: usize) -> f64 {
        self.eff_floor + (1.0 - self.eff_floor) * (b as f64 / self.eff_saturation_batch).min(1.0)
    }
}

pub fn gemm_time(b: usize, d: usize, h: usize, params: &CostParams) -> f64 {
    if b == 0 {
        return 0.0;
    }
    let flops = 2.0 * b as f64 * d as f64 * h as f64;
    params.t_launch + flops / (params.flops_rate * params.efficiency(b))
}

pub fn comm_time(bytes: usize, params: &CostParams) -> f64 {
    if bytes == 0 {
        return 0.0;
    }
    params.link_latency + bytes as f64 / params.link_bandwidth
}

/// `(compute_s, comm_s)` for one device.
pub fn device_times(metrics: &StepMetrics, device: usize, params: &CostParams) -> (f64, f64) {
    let c = &metrics.config;
    let dev = &metrics.devices[device];
    let compute = dev
        .gemms
        .iter()
        .map(|g| gemm_time(g.rows, c.d_model, c.d_hidden, params))
        .sum();
    let comm = dev
        .messages
        .iter()
        .map(|m| comm_time(m.bytes(params.dtype_bytes), params))
        .sum();
    (compute, comm)
}

pub fn device_time(metrics: &StepMetrics, device: usize, params: &CostParams) -> f64 {
    let (compute, comm) = device_times(metrics, device, params);
    compute + comm
}

/// Activations of every executed chunk plus resident and imported weights.
pub fn peak_memory(metrics: &StepMetrics, device: usize, params: &CostParams) -> u64 {
    let c = &metrics.config;
    let dev = &metrics.devices[device];
    let (d, h) = (c.d_model as u64, c.d_hidden as u64);
    let activations: u64 = dev.gemms.iter().map(|g| g.rows as u64 * (d + h)).sum();
    let weights = (c.experts_per_device() + dev.imports.len()) as u64 * d * h;
    params.dtype_bytes as u64 * (activations + weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub device: usize,
    pub tokens_executed: usize,
    pub compute_s: f64,
    pub comm_s: f64,
    pub total_s: f64,
    pub peak_mem_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub path: PathTaken,
    pub devices: Vec<DeviceReport>,
    pub makespan_s: f64,
    pub max_peak_mem_bytes: u64,
    /// Identifies the workload and cost parameters; see [`workload_fingerprint`].
    pub fingerprint: String,
}

/// Hash of the config, the gathered load matrix and the cost parameters.
/// Both methods see the same value for the same workload.
pub fn workload_fingerprint(metrics: &StepMetrics, params: &CostParams) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&metrics.config).expect("config serializes"));
    h.update(serde_json::to_vec(&metrics.loads).expect("loads serialize"));
    h.update(params.hash().as_bytes());
    hex::encode(h.finalize())
}

pub fn report(metrics: &StepMetrics, params: &CostParams) -> SimReport {
    let devices: Vec<DeviceReport> = (0..metrics.devices.len())
        .map(|p| {
            let (compute_s, comm_s) = device_times(metrics, p, params);
            DeviceReport {
                device: p,
                tokens_executed: metrics.devices[p].tokens_executed(),
                compute_s,
                comm_s,
                total_s: compute_s + comm_s,
                peak_mem_bytes: peak_memory(metrics, p, params),
            }
        })
        .collect();
    let makespan_s = devices.iter().map(|d| d.total_s).fold(0.0, f64::max);
    let max_peak_mem_bytes = devices.iter().map(|d| d.peak_mem_bytes).max().unwrap_or(0);
    SimReport {
        path: metrics.path,
        devices,
        makespan_s,
        max_peak_mem_bytes,
        fingerprint: workload_fingerprint(metrics, params),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Baseline makespan over candidate makespan.
    pub speedup: f64,
    /// Baseline max peak memory over candidate max peak memory.
    pub mem_ratio: f64,
}

pub fn compare(baseline: &SimReport, candidate: &SimReport) -> Result<Comparison> {
    if baseline.fingerprint != candidate.fingerprint {
        return Err(LlepError::FingerprintMismatch(
            baseline.fingerprint.clone(),
            candidate.fingerprint.clone(),
        ));
    }
    let ratio = |a: f64, b: f64| if a == b { 1.0 } else { a / b };
    Ok(Comparison {
        speedup: ratio(baseline.makespan_s, candidate.makespan_s),
        mem_ratio: ratio(baseline.max_peak_mem_bytes as f64, candidate.max_peak_mem_bytes as f64),
    })
}

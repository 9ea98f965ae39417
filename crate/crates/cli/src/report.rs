//! Tabular reports and their CSV encoding.
//!
//! Floats are written in Rust's shortest round-trip form, so reading a CSV
//! back gives the exact values that were written.

use std::io::{Read, Write};

use llep_core::{Comparison, Method, SimReport};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Per-device columns, followed by the aggregate-only ones.
pub const DEVICE_COLUMNS: [&str; 8] = [
    "scenario_id",
    "method",
    "device",
    "tokens_executed",
    "compute_s",
    "comm_s",
    "total_s",
    "peak_mem_bytes",
];

/// One line of `simulate.csv`. Aggregate rows leave `device` and the
/// per-device times empty and fill `makespan_s`; when both methods ran, the
/// LLEP aggregate row also carries `speedup` and `mem_ratio`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub scenario_id: String,
    pub method: String,
    pub device: Option<usize>,
    pub tokens_executed: usize,
    pub compute_s: Option<f64>,
    pub comm_s: Option<f64>,
    pub total_s: Option<f64>,
    pub peak_mem_bytes: u64,
    pub makespan_s: Option<f64>,
    #[serde(default)]
    pub speedup: Option<f64>,
    #[serde(default)]
    pub mem_ratio: Option<f64>,
}

/// Everything one simulated scenario produced.
#[derive(Debug, Clone)]
pub struct PointResult {
    pub scenario_id: String,
    pub reports: Vec<(Method, SimReport)>,
    pub comparison: Option<Comparison>,
}

impl PointResult {
    pub fn report(&self, method: Method) -> Option<&SimReport> {
        self.reports.iter().find(|(m, _)| *m == method).map(|(_, r)| r)
    }

    pub fn rows(&self) -> Vec<SimRow> {
        let mut rows = Vec::new();
        for (method, r) in &self.reports {
            for d in &r.devices {
                rows.push(SimRow {
                    scenario_id: self.scenario_id.clone(),
                    method: method.as_str().into(),
                    device: Some(d.device),
                    tokens_executed: d.tokens_executed,
                    compute_s: Some(d.compute_s),
                    comm_s: Some(d.comm_s),
                    total_s: Some(d.total_s),
                    peak_mem_bytes: d.peak_mem_bytes,
                    makespan_s: None,
                    speedup: None,
                    mem_ratio: None,
                });
            }
            let paired = self.comparison.filter(|_| *method == Method::Llep);
            rows.push(SimRow {
                scenario_id: self.scenario_id.clone(),
                method: method.as_str().into(),
                device: None,
                tokens_executed: r.devices.iter().map(|d| d.tokens_executed).sum(),
                compute_s: None,
                comm_s: None,
                total_s: None,
                peak_mem_bytes: r.max_peak_mem_bytes,
                makespan_s: Some(r.makespan_s),
                speedup: paired.map(|c| c.speedup),
                mem_ratio: paired.map(|c| c.mem_ratio),
            });
        }
        rows
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes simulate rows. The `speedup` and `mem_ratio` columns are present
/// only when `paired` is set.
pub fn write_sim_csv<W: Write>(out: W, rows: &[SimRow], paired: bool) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = DEVICE_COLUMNS.to_vec();
    header.push("makespan_s");
    if paired {
        header.extend(["speedup", "mem_ratio"]);
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.scenario_id.clone(),
            r.method.clone(),
            opt(r.device),
            r.tokens_executed.to_string(),
            opt(r.compute_s),
            opt(r.comm_s),
            opt(r.total_s),
            r.peak_mem_bytes.to_string(),
            opt(r.makespan_s),
        ];
        if paired {
            rec.push(opt(r.speedup));
            rec.push(opt(r.mem_ratio));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read, T: for<'de> Deserialize<'de>>(input: R) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}

pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(device: Option<usize>, speedup: Option<f64>) -> SimRow {
        SimRow {
            scenario_id: "95pct_1hot".into(),
            method: "llep".into(),
            device,
            tokens_executed: 12,
            compute_s: device.map(|_| 0.1 + 0.2),
            comm_s: device.map(|_| 1.0 / 3.0),
            total_s: device.map(|_| 1e-17),
            peak_mem_bytes: u64::MAX,
            makespan_s: device.map_or(Some(f64::MIN_POSITIVE), |_| None),
            speedup,
            mem_ratio: speedup.map(|s| s * 0.7),
        }
    }

    #[test]
    fn paired_rows_round_trip() {
        let rows = vec![row(Some(0), None), row(None, Some(3.878_123_456_789_1))];
        let mut buf = Vec::new();
        write_sim_csv(&mut buf, &rows, true).unwrap();
        let back: Vec<SimRow> = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn unpaired_csv_has_no_speedup_column() {
        let rows = vec![row(Some(1), None), row(None, None)];
        let mut buf = Vec::new();
        write_sim_csv(&mut buf, &rows, false).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let header = text.lines().next().unwrap();
        assert!(!header.contains("speedup") && !header.contains("mem_ratio"), "{header}");
        let back: Vec<SimRow> = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }
}

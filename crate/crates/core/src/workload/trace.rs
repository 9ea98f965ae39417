//! Load-histogram traces.
//!
//! One record per line: `record_id,c_0,c_1,...`. The counts are either `N`
//! global loads (expanded with all load on device 0) or `P*N` per-device
//! counts, device-major. Blank lines and lines starting with `#` are ignored.

use std::path::Path;

use crate::config::MoeConfig;
use crate::error::{LlepError, Result};
use crate::planner::LoadMatrix;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub id: String,
    pub loads: LoadMatrix,
}

pub fn load_trace(path: &Path, config: &MoeConfig) -> Result<Vec<TraceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|source| LlepError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_trace(&text, config)
}

pub fn parse_trace(text: &str, config: &MoeConfig) -> Result<Vec<TraceRecord>> {
    let (n, p) = (config.n_experts, config.world_size);
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |message: String| LlepError::Trace { line, message };
        let mut fields = trimmed.split(',').map(str::trim);
        let id = fields.next().unwrap_or_default().to_string();
        if id.is_empty() {
            return Err(err("missing record id".into()));
        }
        let values = fields
            .map(|f| {
                if f.starts_with('-') {
                    return Err(err(format!("negative count `{f}`")));
                }
                f.parse::<usize>().map_err(|_| err(format!("bad count `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = if values.len() == n {
            let mut rows = vec![vec![0; n]; p];
            rows[0] = values;
            rows
        } else if values.len() == n * p {
            values.chunks(n).map(<[usize]>::to_vec).collect()
        } else {
            return Err(err(format!(
                "{} counts, expected N = {n} or P*N = {}",
                values.len(),
                n * p
            )));
        };
        out.push(TraceRecord {
            id,
            loads: LoadMatrix::from_rows(rows)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::imbalance_ratio;

    fn cfg(n: usize, p: usize) -> MoeConfig {
        MoeConfig::new(n, 1, 1, 1, p).unwrap()
    }

    #[test]
    fn empty_text_gives_no_records() {
        assert!(parse_trace("", &cfg(4, 2)).unwrap().is_empty());
        assert!(parse_trace("\n# header\n", &cfg(4, 2)).unwrap().is_empty());
    }

    #[test]
    fn reduced_and_full_records() {
        let r = parse_trace("a,1,2,3,4\nb,1,0,0,0,0,0,0,5\n", &cfg(4, 2)).unwrap();
        assert_eq!(r[0].loads.counts(), &[vec![1, 2, 3, 4], vec![0; 4]]);
        assert_eq!(r[1].loads.global_loads(), &[1, 0, 0, 5]);
        assert_eq!(r[1].id, "b");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let c = cfg(2, 1);
        let e = parse_trace("a,1,1\n\nb,1,-1\n", &c).unwrap_err();
        assert!(matches!(e, LlepError::Trace { line: 3, .. }), "{e}");
        let e = parse_trace("a,1,1,1\n", &c).unwrap_err();
        assert!(matches!(e, LlepError::Trace { line: 1, .. }));
        let e = parse_trace("a,1,x\n", &c).unwrap_err();
        assert!(e.to_string().contains("bad count"));
    }

    #[test]
    fn twenty_percent_hot_expert_at_n32() {
        let mut counts = vec![25; 32];
        counts[11] = 200;
        // pad expert 0 so the total is 1000
        counts[0] = 800 - 25 * 30;
        let line = format!(
            "r0,{}",
            counts.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        );
        let r = parse_trace(&line, &cfg(32, 4)).unwrap();
        assert_eq!(r[0].loads.total(), 1000);
        assert!((imbalance_ratio(r[0].loads.global_loads()) - 6.4).abs() < 1e-12);
    }
}

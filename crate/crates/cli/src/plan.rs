use std::fmt::Write as _;

use clap::Args;
use llep_core::planner::LoadMatrix;
use llep_core::simexec::plan_step;
use llep_core::workload::load_trace;
use llep_core::{imbalance_ratio, sample_loads, Method, MoeConfig, PathTaken, WeightTransfer};
use serde::{Deserialize, Serialize};

use crate::config::{parse_list, prepare_out, MethodSel, RunArgs, RunConfig};
use crate::manifest::{write_json, Manifest};
use crate::CliError;

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Global per-expert loads, e.g. `10,0,0,0`. Sets the expert count.
    #[arg(long)]
    pub loads: Option<String>,
    /// Print plan documents as JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub expert: usize,
    pub device: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub id: String,
    pub path: PathTaken,
    pub imbalance: f64,
    pub capacity: f64,
    pub force_count: usize,
    pub assigned_load: Vec<usize>,
    pub chunks: Vec<ChunkRecord>,
    pub transfers: Vec<WeightTransfer>,
}

/// Plans one load matrix.
pub fn plan_document(
    id: &str,
    loads: &LoadMatrix,
    cfg: &RunConfig,
    config: &MoeConfig,
) -> Result<PlanDocument, CliError> {
    let method = match cfg.method {
        MethodSel::Ep => Method::Ep,
        _ => Method::Llep,
    };
    let planned = plan_step(method, loads, config, &cfg.planner())?;
    Ok(PlanDocument {
        id: id.to_string(),
        path: planned.path,
        imbalance: imbalance_ratio(loads.global_loads()),
        capacity: planned.plan.capacity,
        force_count: planned.plan.force_count,
        assigned_load: planned.plan.assigned_load.clone(),
        chunks: planned
            .plan
            .records()
            .map(|(expert, c)| ChunkRecord {
                expert,
                device: c.device,
                start: c.start,
                end: c.end,
            })
            .collect(),
        transfers: planned.transfers.transfers,
    })
}

pub fn render(doc: &PlanDocument) -> String {
    let mut s = String::new();
    match doc.path {
        PathTaken::EpFallback => {
            let _ = writeln!(s, "[{}] balanced: EP fallback (imbalance {:.3})", doc.id, doc.imbalance);
        }
        PathTaken::Ep => {
            let _ = writeln!(s, "[{}] ep (imbalance {:.3})", doc.id, doc.imbalance);
        }
        PathTaken::Llep => {
            let _ = writeln!(
                s,
                "[{}] llep (imbalance {:.3}, capacity {:.3}, forced {})",
                doc.id, doc.imbalance, doc.capacity, doc.force_count
            );
        }
    }
    let mut current = None;
    for c in &doc.chunks {
        if current != Some(c.expert) {
            if current.is_some() {
                s.push('\n');
            }
            let _ = write!(s, "  expert {}:", c.expert);
            current = Some(c.expert);
        }
        let _ = write!(s, " d{} [{},{})", c.device, c.start, c.end);
    }
    if current.is_some() {
        s.push('\n');
    }
    for t in &doc.transfers {
        let _ = writeln!(s, "  transfer expert {}: d{} -> d{}", t.expert, t.src, t.dst);
    }
    let loads: Vec<String> = doc.assigned_load.iter().map(usize::to_string).collect();
    let _ = writeln!(s, "  device loads: {}", loads.join(" "));
    s
}

/// Resolved run config, layer, and `(id, loads)` records to plan.
pub type PlanInputs = (RunConfig, MoeConfig, Vec<(String, LoadMatrix)>);

pub fn plan_inputs(args: &PlanArgs) -> Result<PlanInputs, CliError> {
    let mut cfg = args.run.resolve()?;
    let inline = match &args.loads {
        Some(text) => Some(parse_list::<usize>(text, "load").map_err(CliError::invalid)?),
        None => None,
    };
    if let Some(l) = &inline {
        cfg.n_experts = l.len();
    }
    let config = cfg.moe()?;
    llep_core::validate_config(&config, &cfg.planner())?;
    let records = if let Some(l) = inline {
        let mut rows = vec![vec![0; l.len()]; config.world_size];
        rows[0] = l;
        vec![("loads".to_string(), LoadMatrix::from_rows(rows)?)]
    } else if let Some(path) = &cfg.trace {
        load_trace(path, &config)?
            .into_iter()
            .map(|r| (r.id, r.loads))
            .collect()
    } else {
        let scenario = cfg.scenario()?;
        vec![(scenario.label(), sample_loads(&scenario)?)]
    };
    Ok((cfg, config, records))
}

pub fn cmd_plan(args: &PlanArgs) -> Result<(), CliError> {
    let (cfg, config, records) = plan_inputs(args)?;
    let out = prepare_out(&cfg.out)?;
    let docs = records
        .iter()
        .map(|(id, loads)| plan_document(id, loads, &cfg, &config))
        .collect::<Result<Vec<_>, _>>()?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&docs)?);
    } else {
        for d in &docs {
            print!("{}", render(d));
        }
    }
    if let Some(dir) = out {
        write_json(&dir.join("plan.json"), &docs)?;
        let mut m = Manifest::new("plan", &cfg, &["plan.json"])?;
        if let Some(l) = &args.loads {
            m.extra = serde_json::json!({ "loads": l });
        }
        m.write(&dir)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(loads: &str, world: usize) -> PlanArgs {
        PlanArgs {
            run: RunArgs {
                world_size: Some(world),
                alpha: Some(1.0),
                min_chunk: Some(1),
                top_k: Some(1),
                ..Default::default()
            },
            loads: Some(loads.into()),
            json: false,
        }
    }

    #[test]
    fn single_hot_expert_splits_in_two() {
        let (cfg, config, records) = plan_inputs(&args("10,0,0,0", 2)).unwrap();
        let doc = plan_document(&records[0].0, &records[0].1, &cfg, &config).unwrap();
        assert_eq!(doc.path, PathTaken::Llep);
        assert_eq!(
            doc.chunks,
            vec![
                ChunkRecord {
                    expert: 0,
                    device: 0,
                    start: 0,
                    end: 5
                },
                ChunkRecord {
                    expert: 0,
                    device: 1,
                    start: 5,
                    end: 10
                },
            ]
        );
        assert_eq!(
            doc.transfers,
            vec![WeightTransfer {
                expert: 0,
                src: 0,
                dst: 1
            }]
        );
        let text = render(&doc);
        assert!(text.contains("expert 0: d0 [0,5) d1 [5,10)"), "{text}");
        assert!(text.contains("transfer expert 0: d0 -> d1"));
    }

    #[test]
    fn uniform_loads_fall_back() {
        let (cfg, config, records) = plan_inputs(&args("5,5,5,5", 2)).unwrap();
        let doc = plan_document(&records[0].0, &records[0].1, &cfg, &config).unwrap();
        assert_eq!(doc.path, PathTaken::EpFallback);
        assert!(doc.transfers.is_empty());
        assert!(render(&doc).contains("balanced: EP fallback"));
        assert_eq!(doc.chunks.len(), 4);
        assert!(doc.chunks.iter().all(|c| c.device == config.native_device(c.expert)));
    }

    #[test]
    fn bad_loads_are_invalid_input() {
        let e = plan_inputs(&args("1,x", 2)).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        // three experts cannot be spread over two devices
        let e = plan_inputs(&args("1,2,3", 2)).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }
}

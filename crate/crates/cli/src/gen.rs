use clap::Args;
use llep_core::generate_routing;
use serde::{Deserialize, Serialize};

use crate::config::{prepare_out, RunArgs};
use crate::manifest::Manifest;
use crate::report::write_csv;
use crate::CliError;

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

/// One routed slot: token `token` on `device` sends its `slot`-th choice to
/// `expert` with weight `gate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub device: usize,
    pub token: usize,
    pub slot: usize,
    pub expert: usize,
    pub gate: f64,
}

pub fn routing_rows(args: &GenArgs) -> Result<Vec<RoutingRow>, CliError> {
    let cfg = args.run.resolve()?;
    cfg.validate()?;
    let scenario = cfg.scenario()?;
    let c = scenario.config;
    let elements = (c.world_size * scenario.tokens_per_device * c.d_model) as u64;
    if elements > cfg.element_budget {
        return Err(CliError::invalid(anyhow::anyhow!(
            "token batches need {elements} elements, over the budget of {}",
            cfg.element_budget
        )));
    }
    let (_, routings) = generate_routing(&scenario, None)?;
    let mut rows = Vec::new();
    for (device, r) in routings.iter().enumerate() {
        for token in 0..r.num_tokens() {
            for (slot, (&expert, &gate)) in r.row_indices(token).iter().zip(r.row_gates(token)).enumerate() {
                rows.push(RoutingRow {
                    device,
                    token,
                    slot,
                    expert,
                    gate,
                });
            }
        }
    }
    Ok(rows)
}

pub fn cmd_gen(args: &GenArgs) -> Result<(), CliError> {
    let cfg = args.run.resolve()?;
    let out = prepare_out(&cfg.out)?;
    let rows = routing_rows(args)?;
    match out {
        Some(dir) => {
            let file = std::fs::File::create(dir.join("routing.csv"))?;
            write_csv(std::io::BufWriter::new(file), &rows)?;
            Manifest::new("gen", &cfg, &["routing.csv"])?.write(&dir)?;
            println!("wrote {} routed slots", rows.len());
        }
        None => write_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

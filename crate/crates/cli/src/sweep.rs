use anyhow::anyhow;
use clap::{Args, ValueEnum};
use llep_core::{Method, PathTaken};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{parse_list, prepare_out, MethodSel, RunArgs, RunConfig};
use crate::manifest::Manifest;
use crate::report::write_csv;
use crate::simulate::run_point;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Alpha,
    Lambda,
    /// Tokens per device.
    Batch,
    /// Sets both `d_model` and `d_hidden`.
    Hidden,
    Experts,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Alpha => "alpha",
            Axis::Lambda => "lambda",
            Axis::Batch => "batch",
            Axis::Hidden => "hidden",
            Axis::Experts => "experts",
        }
    }

    fn is_integer(self) -> bool {
        matches!(self, Axis::Batch | Axis::Hidden | Axis::Experts)
    }

    /// The base config with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig, CliError> {
        let mut c = base.clone();
        let whole = || {
            if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(CliError::invalid(anyhow!(
                    "{} value {value} is not a positive integer",
                    self.as_str()
                )))
            }
        };
        match self {
            Axis::Alpha => c.alpha = value,
            Axis::Lambda => c.lambda = value,
            Axis::Batch => c.tokens_per_device = whole()?,
            Axis::Hidden => {
                c.d_model = whole()?;
                c.d_hidden = c.d_model;
            }
            Axis::Experts => c.n_experts = whole()?,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated axis values.
    #[arg(long)]
    pub values: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub axis_value: f64,
    pub scenario_id: String,
    pub llep_path: PathTaken,
    pub speedup: f64,
    pub mem_ratio: f64,
    pub ep_makespan_s: f64,
    pub llep_makespan_s: f64,
    pub ep_peak_mem_bytes: u64,
    pub llep_peak_mem_bytes: u64,
}

/// Runs every point (concurrently) and returns rows sorted by axis value.
pub fn sweep(base: &RunConfig, axis: Axis, values: &[f64]) -> Result<Vec<SweepRow>, CliError> {
    if base.method != MethodSel::Both {
        return Err(CliError::invalid(anyhow!(
            "sweep compares EP with LLEP; use --method both"
        )));
    }
    if base.trace.is_some() {
        return Err(CliError::invalid(anyhow!("sweep runs scenarios, not traces")));
    }
    let configs = values
        .iter()
        .map(|&v| axis.apply(base, v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = values
        .par_iter()
        .zip(configs.par_iter())
        .map(|(&value, cfg)| {
            let p = run_point(cfg)?;
            let (ep, llep) = (
                p.report(Method::Ep).expect("both methods ran"),
                p.report(Method::Llep).expect("both methods ran"),
            );
            let c = p.comparison.expect("both methods ran");
            Ok(SweepRow {
                axis: axis.as_str().into(),
                axis_value: value,
                scenario_id: p.scenario_id.clone(),
                llep_path: llep.path,
                speedup: c.speedup,
                mem_ratio: c.mem_ratio,
                ep_makespan_s: ep.makespan_s,
                llep_makespan_s: llep.makespan_s,
                ep_peak_mem_bytes: ep.max_peak_mem_bytes,
                llep_peak_mem_bytes: llep.max_peak_mem_bytes,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    rows.sort_by(|a, b| a.axis_value.total_cmp(&b.axis_value));
    Ok(rows)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let base = args.run.resolve()?;
    let values: Vec<f64> = parse_list(&args.values, args.axis.as_str()).map_err(CliError::invalid)?;
    if args.axis.is_integer() {
        for v in &values {
            args.axis.apply(&base, *v)?;
        }
    }
    let out = prepare_out(&base.out)?;
    let rows = sweep(&base, args.axis, &values)?;
    match out {
        Some(dir) => {
            let file = std::fs::File::create(dir.join("sweep.csv"))?;
            write_csv(std::io::BufWriter::new(file), &rows)?;
            let mut m = Manifest::new("sweep", &base, &["sweep.csv"])?;
            m.extra = serde_json::json!({ "axis": args.axis, "values": values });
            m.write(&dir)?;
            for r in &rows {
                println!(
                    "{} = {}: speedup {:.3}, mem ratio {:.3}",
                    r.axis, r.axis_value, r.speedup, r.mem_ratio
                );
            }
        }
        None => write_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

use std::io::Write;

use anyhow::anyhow;
use clap::Args;
use llep_core::rng::{stream, STREAM_PARAMS};
use llep_core::simexec::reference_forward_routed;
use llep_core::workload::load_trace;
use llep_core::{
    compare, ep_dispatch_combine, generate_routing, llep_dispatch_combine, report, sample_loads, simulate_counts,
    ExecMode, Method, ModelParams, MoeConfig, Scenario,
};

use crate::config::{prepare_out, MethodSel, RunArgs, RunConfig};
use crate::manifest::Manifest;
use crate::report::{write_sim_csv, PointResult, SimRow};
use crate::CliError;

/// Largest elementwise difference tolerated between a simulated step and the
/// dense reference.
pub const EXACTNESS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

/// Matrix elements the dense reference and both simulated steps hold at once:
/// tokens, routed copies and their outputs, outputs, and weights.
pub fn dense_elements(config: &MoeConfig, tokens_per_device: usize) -> u64 {
    let tokens = (config.world_size * tokens_per_device) as u64;
    let (d, h, n, k) = (
        config.d_model as u64,
        config.d_hidden as u64,
        config.n_experts as u64,
        config.top_k as u64,
    );
    tokens * (d + h) + tokens * k * (d + h) + n * d * h + d * n
}

pub fn check_budget(config: &MoeConfig, tokens_per_device: usize, budget: u64) -> Result<(), CliError> {
    let need = dense_elements(config, tokens_per_device);
    if need > budget {
        return Err(CliError::invalid(anyhow!(
            "workload needs {need} matrix elements, over the budget of {budget}; use --cost-only or raise --element-budget"
        )));
    }
    Ok(())
}

fn finish(scenario_id: String, reports: Vec<(Method, llep_core::SimReport)>) -> Result<PointResult, CliError> {
    let comparison = match (&reports[..], reports.len()) {
        ([(_, ep), (_, llep)], 2) => Some(compare(ep, llep)?),
        _ => None,
    };
    Ok(PointResult {
        scenario_id,
        reports,
        comparison,
    })
}

/// Tensor path: run each method, check it against the dense reference, price it.
pub fn run_numeric(cfg: &RunConfig, scenario: &Scenario) -> Result<PointResult, CliError> {
    let config = scenario.config;
    check_budget(&config, scenario.tokens_per_device, cfg.element_budget)?;
    let costs = cfg.cost_params()?;
    let params = ModelParams::random(&config, &mut stream(scenario.seed, STREAM_PARAMS));
    let (batches, routings) = generate_routing(scenario, None)?;
    let reference = reference_forward_routed(&batches, &routings, &params, &config)?;
    let mut reports = Vec::new();
    for &method in cfg.method.methods() {
        let step = match method {
            Method::Ep => ep_dispatch_combine(&batches, &routings, &params, &config, ExecMode::Parallel)?,
            Method::Llep => llep_dispatch_combine(
                &batches,
                &routings,
                &params,
                &config,
                &cfg.planner(),
                ExecMode::Parallel,
            )?,
        };
        for (p, (got, want)) in step.outputs.iter().zip(&reference).enumerate() {
            let diff = got.max_abs_diff(want);
            if !matches!(diff, Some(d) if d <= EXACTNESS_TOL) {
                return Err(CliError::failed(anyhow!(
                    "exactness check failed: {} on device {p} differs from the reference by {diff:?} (seed {})",
                    method.as_str(),
                    scenario.seed
                )));
            }
        }
        reports.push((method, report(&step.metrics, &costs)));
    }
    finish(scenario.label(), reports)
}

/// Count path: plan and price a load matrix without touching tensors.
pub fn run_counts(cfg: &RunConfig, id: String, loads: &llep_core::LoadMatrix) -> Result<PointResult, CliError> {
    let config = cfg.moe()?;
    let costs = cfg.cost_params()?;
    let mut reports = Vec::new();
    for &method in cfg.method.methods() {
        let (_, metrics) = simulate_counts(method, loads, &config, &cfg.planner())?;
        reports.push((method, report(&metrics, &costs)));
    }
    finish(id, reports)
}

/// One scenario under the run config, on the tensor or count path.
pub fn run_point(cfg: &RunConfig) -> Result<PointResult, CliError> {
    cfg.validate()?;
    let scenario = cfg.scenario()?;
    if cfg.cost_only {
        run_counts(cfg, scenario.label(), &sample_loads(&scenario)?)
    } else {
        run_numeric(cfg, &scenario)
    }
}

/// All points a simulate run covers: every trace record, or the scenario.
pub fn simulate(cfg: &RunConfig) -> Result<Vec<PointResult>, CliError> {
    cfg.validate()?;
    match &cfg.trace {
        Some(path) => {
            let config = cfg.moe()?;
            load_trace(path, &config)?
                .into_iter()
                .map(|r| run_counts(cfg, r.id, &r.loads))
                .collect()
        }
        None => Ok(vec![run_point(cfg)?]),
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let cfg = args.run.resolve()?;
    let out = prepare_out(&cfg.out)?;
    let points = simulate(&cfg)?;
    let rows: Vec<SimRow> = points.iter().flat_map(PointResult::rows).collect();
    let paired = cfg.method == MethodSel::Both;
    match out {
        Some(dir) => {
            let file = std::fs::File::create(dir.join("simulate.csv"))?;
            write_sim_csv(std::io::BufWriter::new(file), &rows, paired)?;
            Manifest::new("simulate", &cfg, &["simulate.csv"])?.write(&dir)?;
            let mut stdout = std::io::stdout().lock();
            for p in &points {
                for (m, r) in &p.reports {
                    writeln!(
                        stdout,
                        "{} {}: makespan {:.6e} s, peak {} bytes, path {:?}",
                        p.scenario_id,
                        m.as_str(),
                        r.makespan_s,
                        r.max_peak_mem_bytes,
                        r.path
                    )?;
                }
                if let Some(c) = p.comparison {
                    writeln!(
                        stdout,
                        "{} speedup {:.3}, mem ratio {:.3}",
                        p.scenario_id, c.speedup, c.mem_ratio
                    )?;
                }
            }
        }
        None => write_sim_csv(std::io::stdout().lock(), &rows, paired)?,
    }
    Ok(())
}

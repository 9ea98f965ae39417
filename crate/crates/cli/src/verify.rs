//! Randomized self-checks. Trial `t` of a run with seed `s` uses seed
//! `s + t`, so any failure can be replayed alone with `--seed s+t --trials 1`.

use std::fmt;

use clap::Args;
use llep_core::rng::{seeded, stream, STREAM_PARAMS, STREAM_UPSTREAM};
use llep_core::simexec::{reference_forward_routed, reference_weight_grads, upstream_loss};
use llep_core::{
    backward_weights, check_plan, ep_dispatch_combine, generate_routing, lla_plan, llep_dispatch_combine,
    materialize_send_schedule, ExecMode, LoadMatrix, Matrix, ModelParams, MoeConfig, PathTaken, PlannerConfig,
    Scenario,
};
use rand::Rng;
use serde::Serialize;

use crate::manifest::write_json;
use crate::simulate::EXACTNESS_TOL;
use crate::CliError;

pub const GRAD_TOL: f64 = 1e-10;
pub const FD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const FD_SAMPLES: usize = 5;

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: u64,
    /// Write `verify.json` with per-suite results here.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
    /// Test hook: shorten one chunk in every plan-invariant trial.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Exactness,
    PlanInvariants,
    Gradients,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Exactness, Suite::PlanInvariants, Suite::Gradients];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Exactness => "exactness",
            Suite::PlanInvariants => "plan-invariants",
            Suite::Gradients => "gradients",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub suite: Suite,
    pub seed: u64,
    pub config: String,
    pub reason: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} failed: seed {} ({}): {}",
            self.suite.as_str(),
            self.seed,
            self.config,
            self.reason
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteSummary {
    pub suite: Suite,
    pub passed: u64,
    pub trials: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifySummary {
    pub seed: u64,
    pub suites: Vec<SuiteSummary>,
    pub failures: Vec<Failure>,
}

impl VerifySummary {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

type Trial = Result<(), (String, String)>;

/// False for NaN, unlike `!(x > tol)`.
fn within(x: f64, tol: f64) -> bool {
    x <= tol
}

fn describe(config: &MoeConfig, b: usize, scenario: &str, planner: &PlannerConfig) -> String {
    format!(
        "N={} K={} D={} H={} P={} B={b} scenario={scenario} alpha={} m={} lambda={}",
        config.n_experts,
        config.top_k,
        config.d_model,
        config.d_hidden,
        config.world_size,
        planner.alpha,
        planner.min_chunk,
        planner.lambda
    )
}

fn max_diff(a: &[Matrix], b: &[Matrix]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.max_abs_diff(y).unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max)
}

/// Random small layer with one of the three standard skews.
fn random_scenario<R: Rng>(rng: &mut R, seed: u64, p_choices: &[usize], dim: (usize, usize), max_b: usize) -> Scenario {
    let p = p_choices[rng.random_range(0..p_choices.len())];
    let n = p * rng.random_range(1..=32 / p);
    let k = rng.random_range(1..=n.min(4));
    let config = MoeConfig::new(
        n,
        k,
        rng.random_range(dim.0..=dim.1),
        rng.random_range(dim.0..=dim.1),
        p,
    )
    .expect("bounds keep the config valid");
    let b = rng.random_range(0..=max_b);
    match rng.random_range(0..3) {
        1 if n > 4 => Scenario::concentrated(config, 4, 0.5, b, seed),
        2 if n > 1 => Scenario::concentrated(config, 1, 0.95, b, seed),
        _ => Scenario::balanced(config, b, seed),
    }
}

pub fn exactness_trial(seed: u64) -> Trial {
    let mut rng = seeded(seed);
    let s = random_scenario(&mut rng, seed, &[1, 2, 4, 8], (1, 64), 256);
    let planner = PlannerConfig {
        alpha: rng.random_range(1.0..=2.0),
        min_chunk: [0, 1, 4, 16][rng.random_range(0..4)],
        lambda: [1.0, 1.3][rng.random_range(0..2)],
    };
    let config = s.config;
    let desc = describe(&config, s.tokens_per_device, &s.label(), &planner);
    let fail = |r: String| (desc.clone(), r);
    let params = ModelParams::random(&config, &mut stream(seed, STREAM_PARAMS));
    let (batches, routings) = generate_routing(&s, None).map_err(|e| fail(e.to_string()))?;
    let reference = reference_forward_routed(&batches, &routings, &params, &config).map_err(|e| fail(e.to_string()))?;
    let ep = ep_dispatch_combine(&batches, &routings, &params, &config, ExecMode::Serial)
        .map_err(|e| fail(e.to_string()))?;
    let llep = llep_dispatch_combine(&batches, &routings, &params, &config, &planner, ExecMode::Serial)
        .map_err(|e| fail(e.to_string()))?;
    for (name, out) in [("ep", &ep.outputs), ("llep", &llep.outputs)] {
        let d = max_diff(out, &reference);
        if !within(d, EXACTNESS_TOL) {
            return Err(fail(format!("{name} differs from the reference by {d:e}")));
        }
    }
    let d = max_diff(&ep.outputs, &llep.outputs);
    if !within(d, EXACTNESS_TOL) {
        return Err(fail(format!("ep and llep differ by {d:e}")));
    }
    Ok(())
}

/// Moves the end of the first multi-token chunk down by one.
fn shorten_one_chunk(plan: &mut llep_core::AssignmentPlan) -> bool {
    for chunks in &mut plan.per_expert {
        if let Some(c) = chunks.iter_mut().find(|c| c.end - c.start > 1) {
            c.end -= 1;
            return true;
        }
    }
    false
}

pub fn plan_trial(seed: u64, inject_fault: bool) -> Trial {
    let mut rng = seeded(seed);
    let p = rng.random_range(1..=16);
    let n = p * rng.random_range(1..=512 / p);
    let config = MoeConfig::new(n, 1, 1, 1, p).expect("bounds keep the config valid");
    let planner = PlannerConfig {
        alpha: rng.random_range(1.0..=3.0),
        min_chunk: [0, 1, 64, 1024][rng.random_range(0..4)],
        lambda: 1.0,
    };
    let mut loads: Vec<usize> = match rng.random_range(0..3) {
        0 => (0..n).map(|_| rng.random_range(0..1000)).collect(),
        1 => (0..n).map(|_| rng.random_range(0..20)).collect(),
        _ => vec![0; n],
    };
    for _ in 0..rng.random_range(0..=3) {
        loads[rng.random_range(0..n)] += rng.random_range(0..100_000);
    }
    let desc = format!(
        "N={n} P={p} alpha={} m={} loads total {}",
        planner.alpha,
        planner.min_chunk,
        loads.iter().sum::<usize>()
    );
    let fail = |r: String| (desc.clone(), r);
    let (mut plan, transfers) = lla_plan(&loads, &config, &planner).map_err(|e| fail(e.to_string()))?;
    if inject_fault {
        shorten_one_chunk(&mut plan);
    }
    let violations = check_plan(&loads, &config, &plan, &transfers);
    if !violations.is_empty() {
        let names: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(fail(format!("violated {}", names.join("; "))));
    }
    let mut rows = vec![vec![0; n]; p];
    rows[0] = loads;
    let matrix = LoadMatrix::from_rows(rows).map_err(|e| fail(e.to_string()))?;
    materialize_send_schedule(&plan, &matrix).map_err(|e| fail(e.to_string()))?;
    Ok(())
}

/// Returns whether the step spilled work, and so moved weights and gradients.
pub fn gradient_trial(seed: u64) -> Result<bool, (String, String)> {
    let mut rng = seeded(seed);
    let p = [2, 4, 8][rng.random_range(0..3)];
    let n = p * rng.random_range(1..=4);
    let k = rng.random_range(1..=n.min(4));
    let config = MoeConfig::new(n, k, rng.random_range(2..=16), rng.random_range(2..=16), p)
        .expect("bounds keep the config valid");
    let b = rng.random_range(8..=48);
    let s = Scenario::concentrated(config, 1, 0.95, b, seed);
    let planner = PlannerConfig {
        alpha: 1.0,
        min_chunk: 1,
        lambda: 1.0,
    };
    let desc = describe(&config, b, &s.label(), &planner);
    let fail = |r: String| (desc.clone(), r);
    let params = ModelParams::random(&config, &mut stream(seed, STREAM_PARAMS));
    let (batches, routings) = generate_routing(&s, None).map_err(|e| fail(e.to_string()))?;
    let mut up = stream(seed, STREAM_UPSTREAM);
    let dh: Vec<Matrix> = batches
        .iter()
        .map(|t| Matrix::random_normal(t.len(), config.d_hidden, &mut up))
        .collect();
    let out = backward_weights(&batches, &routings, &dh, &params, &config, &planner, ExecMode::Serial)
        .map_err(|e| fail(e.to_string()))?;
    let oracle = reference_weight_grads(&batches, &routings, &dh, &config).map_err(|e| fail(e.to_string()))?;
    for (e, want) in oracle.iter().enumerate() {
        let got = out
            .grads
            .expert(e)
            .ok_or_else(|| fail(format!("no gradient for expert {e}")))?;
        if got.max_abs_diff(want).is_none_or(|d| !within(d, GRAD_TOL)) {
            return Err(fail(format!("expert {e} gradient differs from the oracle")));
        }
    }
    let loss = |params: &ModelParams| -> Result<f64, (String, String)> {
        let y = reference_forward_routed(&batches, &routings, params, &config).map_err(|e| fail(e.to_string()))?;
        Ok(upstream_loss(&y, &dh))
    };
    for _ in 0..FD_SAMPLES {
        let e = rng.random_range(0..n);
        let (r, c) = (
            rng.random_range(0..config.d_model),
            rng.random_range(0..config.d_hidden),
        );
        let w = params.expert_weights[e].get(r, c);
        let mut shifted = params.clone();
        shifted.expert_weights[e].set(r, c, w + FD_STEP);
        let plus = loss(&shifted)?;
        shifted.expert_weights[e].set(r, c, w - FD_STEP);
        let minus = loss(&shifted)?;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let g = oracle[e].get(r, c);
        let got = out.grads.expert(e).expect("checked above").get(r, c);
        if !within((fd - got).abs() / g.abs().max(1.0), FD_REL_TOL) {
            return Err(fail(format!("W{e}[{r},{c}]: finite difference {fd} vs {got}")));
        }
    }
    if out.planned.path == PathTaken::Llep {
        let loads = out.metrics.loads.global_loads().to_vec();
        let v = check_plan(&loads, &config, &out.planned.plan, &out.planned.transfers);
        if !v.is_empty() {
            return Err(fail(format!("backward plan violated {}", v[0])));
        }
    }
    Ok(!out.planned.transfers.is_empty())
}

/// Runs every suite for `trials` trials.
pub fn verify(seed: u64, trials: u64, inject_fault: bool) -> VerifySummary {
    let mut suites = Vec::new();
    let mut failures = Vec::new();
    for suite in Suite::ALL {
        let mut passed = 0;
        for t in 0..trials {
            let s = seed.wrapping_add(t);
            let result = match suite {
                Suite::Exactness => exactness_trial(s),
                Suite::PlanInvariants => plan_trial(s, inject_fault),
                Suite::Gradients => gradient_trial(s).map(|_| ()),
            };
            match result {
                Ok(()) => passed += 1,
                Err((config, reason)) => failures.push(Failure {
                    suite,
                    seed: s,
                    config,
                    reason,
                }),
            }
        }
        suites.push(SuiteSummary { suite, passed, trials });
    }
    VerifySummary { seed, suites, failures }
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let out = crate::config::prepare_out(&args.out)?;
    if args.trials == 0 {
        eprintln!("warning: 0 trials requested, nothing was checked");
    }
    let summary = verify(args.seed, args.trials, args.inject_fault);
    for s in &summary.suites {
        println!("{}: {}/{} passed", s.suite.as_str(), s.passed, s.trials);
    }
    for f in &summary.failures {
        println!("{f}");
    }
    if let Some(dir) = out {
        write_json(&dir.join("verify.json"), &summary)?;
    }
    if summary.ok() {
        Ok(())
    } else {
        Err(CliError::failed(anyhow::anyhow!(
            "{} verification trial(s) failed",
            summary.failures.len()
        )))
    }
}

//! Run configuration: a JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use llep_core::{CostParams, Method, MoeConfig, PlannerConfig, Scenario};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_ELEMENT_BUDGET: u64 = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MethodSel {
    Ep,
    Llep,
    Both,
}

impl MethodSel {
    pub fn methods(self) -> &'static [Method] {
        match self {
            MethodSel::Ep => &[Method::Ep],
            MethodSel::Llep => &[Method::Llep],
            MethodSel::Both => &[Method::Ep, Method::Llep],
        }
    }
}

/// Everything one run needs. Every field has a default, so a config file
/// may set any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub world_size: usize,
    pub tokens_per_device: usize,
    /// Unset means a balanced scenario.
    pub hot_fraction: Option<f64>,
    pub hot_count: usize,
    pub alpha: f64,
    pub min_chunk: usize,
    pub lambda: f64,
    pub profile: String,
    /// Inline cost parameters; take precedence over `profile`.
    pub cost_params: Option<CostParams>,
    pub method: MethodSel,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub cost_only: bool,
    pub element_budget: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let planner = PlannerConfig::default();
        Self {
            n_experts: 32,
            top_k: 4,
            d_model: 64,
            d_hidden: 64,
            world_size: 8,
            tokens_per_device: 256,
            hot_fraction: None,
            hot_count: 1,
            alpha: planner.alpha,
            min_chunk: planner.min_chunk,
            lambda: planner.lambda,
            profile: llep_core::costmodel::DEFAULT_PROFILE.to_string(),
            cost_params: None,
            method: MethodSel::Both,
            seed: 0,
            out: None,
            trace: None,
            cost_only: false,
            element_budget: DEFAULT_ELEMENT_BUDGET,
        }
    }
}

impl RunConfig {
    pub fn moe(&self) -> Result<MoeConfig, CliError> {
        Ok(MoeConfig::new(
            self.n_experts,
            self.top_k,
            self.d_model,
            self.d_hidden,
            self.world_size,
        )?)
    }

    pub fn planner(&self) -> PlannerConfig {
        PlannerConfig {
            alpha: self.alpha,
            min_chunk: self.min_chunk,
            lambda: self.lambda,
        }
    }

    pub fn scenario(&self) -> Result<Scenario, CliError> {
        let config = self.moe()?;
        let s = match self.hot_fraction {
            None => Scenario::balanced(config, self.tokens_per_device, self.seed),
            Some(x) => Scenario::concentrated(config, self.hot_count, x, self.tokens_per_device, self.seed),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn cost_params(&self) -> Result<CostParams, CliError> {
        let p = match self.cost_params {
            Some(p) => p,
            None => CostParams::resolve(&self.profile)?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        llep_core::validate_config(&self.moe()?, &self.planner())?;
        self.scenario()?;
        self.cost_params()?;
        if self.element_budget == 0 {
            return Err(CliError::invalid(anyhow::anyhow!("element budget must be positive")));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Cost profile name (`h200`, `compute-only`) or a JSON file of cost parameters.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long, value_enum)]
    pub method: Option<MethodSel>,

    #[arg(long)]
    pub n_experts: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_hidden: Option<usize>,
    #[arg(long)]
    pub world_size: Option<usize>,
    #[arg(long)]
    pub tokens_per_device: Option<usize>,
    /// Share of routed slots sent to the hot experts; omit for a balanced scenario.
    #[arg(long)]
    pub hot_fraction: Option<f64>,
    #[arg(long)]
    pub hot_count: Option<usize>,

    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub min_chunk: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,

    /// Load trace, one record per line: `id,c_0,...` with N or P*N counts.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Skip tensors: plan and price sampled slot counts only.
    #[arg(long)]
    pub cost_only: bool,
    /// Refuse numeric runs needing more than this many matrix elements.
    #[arg(long)]
    pub element_budget: Option<u64>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path).map_err(CliError::invalid)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { c.$field = v; })*
            };
        }
        set!(
            seed,
            profile,
            method,
            n_experts,
            top_k,
            d_model,
            d_hidden,
            world_size,
            tokens_per_device,
            hot_count,
            alpha,
            min_chunk,
            lambda,
            element_budget
        );
        if self.hot_fraction.is_some() {
            c.hot_fraction = self.hot_fraction;
        }
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        if self.trace.is_some() {
            c.trace = self.trace.clone();
        }
        if self.profile.is_some() {
            c.cost_params = None;
        }
        c.cost_only |= self.cost_only;
        Ok(c)
    }
}

/// Creates the output directory if one was requested.
pub fn prepare_out(out: &Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
    let Some(dir) = out else { return Ok(None) };
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
        .map_err(CliError::invalid)?;
    let probe = dir.join(".llep-write-test");
    std::fs::write(&probe, b"")
        .and_then(|_| std::fs::remove_file(&probe))
        .with_context(|| format!("output directory {} is not writable", dir.display()))
        .map_err(CliError::invalid)?;
    Ok(Some(dir.clone()))
}

pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> anyhow::Result<Vec<T>> {
    let values = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| anyhow::anyhow!("bad {what} value `{s}`")))
        .collect::<anyhow::Result<Vec<T>>>()?;
    if values.is_empty() {
        bail!("empty {what} list");
    }
    Ok(values)
}

//! Synthetic routing scenarios and trace ingestion.

mod trace;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::config::{ModelParams, MoeConfig, TokenBatch};
use crate::error::{LlepError, Result};
use crate::planner::LoadMatrix;
use crate::rng::{stream, STREAM_ROUTING, STREAM_TOKENS};
use crate::router::{route, RouterOutput};
use crate::tensor::Matrix;

pub use trace::{load_trace, parse_trace, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioMode {
    Balanced,
    /// `hot_fraction` of routed slots split evenly over experts `0..hot_count`.
    Concentrated {
        hot_count: usize,
        hot_fraction: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub config: MoeConfig,
    pub mode: ScenarioMode,
    pub tokens_per_device: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn balanced(config: MoeConfig, tokens_per_device: usize, seed: u64) -> Self {
        Self {
            config,
            mode: ScenarioMode::Balanced,
            tokens_per_device,
            seed,
        }
    }

    pub fn concentrated(
        config: MoeConfig,
        hot_count: usize,
        hot_fraction: f64,
        tokens_per_device: usize,
        seed: u64,
    ) -> Self {
        Self {
            config,
            mode: ScenarioMode::Concentrated {
                hot_count,
                hot_fraction,
            },
            tokens_per_device,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if let ScenarioMode::Concentrated {
            hot_count,
            hot_fraction,
        } = self.mode
        {
            let n = self.config.n_experts;
            if hot_count == 0 || hot_count > n {
                return Err(LlepError::InvalidScenario(format!(
                    "hot count {hot_count} outside 1..={n}"
                )));
            }
            if !(hot_fraction > 0.0 && hot_fraction < 1.0) {
                return Err(LlepError::InvalidScenario(format!(
                    "hot fraction {hot_fraction} outside (0, 1)"
                )));
            }
            if hot_count == n {
                return Err(LlepError::InvalidScenario(
                    "every expert is hot, nothing absorbs the remainder".into(),
                ));
            }
        }
        Ok(())
    }

    /// Short stable label such as `95pct_1hot` or `balanced`.
    pub fn label(&self) -> String {
        match self.mode {
            ScenarioMode::Balanced => "balanced".into(),
            ScenarioMode::Concentrated {
                hot_count,
                hot_fraction,
            } => format!("{}pct_{hot_count}hot", (hot_fraction * 100.0).round()),
        }
    }
}

/// Per-expert probability of a routed slot.
pub fn target_distribution(scenario: &Scenario) -> Result<Vec<f64>> {
    scenario.validate()?;
    let n = scenario.config.n_experts;
    Ok(match scenario.mode {
        ScenarioMode::Balanced => vec![1.0 / n as f64; n],
        ScenarioMode::Concentrated {
            hot_count,
            hot_fraction,
        } => {
            let hot = hot_fraction / hot_count as f64;
            let cold = (1.0 - hot_fraction) / (n - hot_count) as f64;
            (0..n).map(|i| if i < hot_count { hot } else { cold }).collect()
        }
    })
}

/// Draws `k` distinct indices with probability proportional to `weights`,
/// without replacement.
fn sample_distinct<R: Rng + ?Sized>(weights: &[f64], k: usize, rng: &mut R, out: &mut Vec<usize>) {
    out.clear();
    let mut remaining: f64 = weights.iter().sum();
    for _ in 0..k {
        let mut r = rng.random::<f64>() * remaining;
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 || out.contains(&i) {
                continue;
            }
            pick = Some(i);
            if r < w {
                break;
            }
            r -= w;
        }
        // `pick` falls through to the last eligible index on rounding.
        let i = pick.expect("caller checked enough positive weights");
        remaining -= weights[i];
        out.push(i);
    }
}

/// Per-device token batches and routing for a scenario.
///
/// Without `params`, each token's `K` experts are sampled without
/// replacement from [`target_distribution`] and gates are `1/K`. With
/// `params`, tokens are routed by the learned router instead and the
/// scenario's mode is not used.
pub fn generate_routing(
    scenario: &Scenario,
    params: Option<&ModelParams>,
) -> Result<(Vec<TokenBatch>, Vec<RouterOutput>)> {
    let dist = target_distribution(scenario)?;
    let c = &scenario.config;
    let positive = dist.iter().filter(|&&p| p > 0.0).count();
    if c.top_k > positive {
        return Err(LlepError::InvalidScenario(format!(
            "K = {} exceeds the {positive} experts with positive probability",
            c.top_k
        )));
    }
    let b = scenario.tokens_per_device;
    let mut token_rng = stream(scenario.seed, STREAM_TOKENS);
    let mut route_rng = stream(scenario.seed, STREAM_ROUTING);
    let mut batches = Vec::with_capacity(c.world_size);
    let mut routings = Vec::with_capacity(c.world_size);
    let gate = 1.0 / c.top_k as f64;
    let mut picks = Vec::with_capacity(c.top_k);
    for p in 0..c.world_size {
        let batch = TokenBatch::new(p, Matrix::random_normal(b, c.d_model, &mut token_rng));
        let routing = match params {
            Some(params) => route(&batch, params, c)?,
            None => {
                let mut indices = Vec::with_capacity(b * c.top_k);
                for _ in 0..b {
                    sample_distinct(&dist, c.top_k, &mut route_rng, &mut picks);
                    indices.extend_from_slice(&picks);
                }
                RouterOutput::new(p, c.top_k, indices, vec![gate; b * c.top_k])?
            }
        };
        batches.push(batch);
        routings.push(routing);
    }
    Ok((batches, routings))
}

/// Deterministic per-device counts: each device's `B_p * K` slots are split
/// over [`target_distribution`] by largest remainder, ties to the lower
/// expert id. Used by the count-only path where no tensors exist.
pub fn apportioned_loads(scenario: &Scenario) -> Result<LoadMatrix> {
    let dist = target_distribution(scenario)?;
    let c = &scenario.config;
    let slots = scenario.tokens_per_device * c.top_k;
    let row = largest_remainder(&dist, slots);
    LoadMatrix::from_rows(vec![row; c.world_size])
}

/// Per-device counts drawn at slot level: each device's `B_p * K` slots
/// follow a seeded multinomial over [`target_distribution`], with no
/// per-token distinctness. This is the count-only path for layers too large
/// to materialize.
pub fn sample_loads(scenario: &Scenario) -> Result<LoadMatrix> {
    let dist = target_distribution(scenario)?;
    let c = &scenario.config;
    let slots = scenario.tokens_per_device * c.top_k;
    let mut rng = stream(scenario.seed, STREAM_ROUTING);
    let mut rows = Vec::with_capacity(c.world_size);
    for _ in 0..c.world_size {
        let mut left = slots as u64;
        let mut mass = 1.0;
        let mut row = Vec::with_capacity(dist.len());
        for &p in &dist {
            let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
            let draw = if left == 0 || q == 0.0 {
                0
            } else {
                Binomial::new(left, q)
                    .map_err(|e| LlepError::InvalidScenario(e.to_string()))?
                    .sample(&mut rng)
            };
            row.push(draw as usize);
            left -= draw;
            mass -= p;
        }
        // rounding in `mass` can leave a few slots unassigned
        *row.last_mut().expect("N >= 1") += left as usize;
        rows.push(row);
    }
    LoadMatrix::from_rows(rows)
}

fn largest_remainder(dist: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = dist.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra)
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, k: usize, p: usize) -> MoeConfig {
        MoeConfig::new(n, k, 4, 4, p).unwrap()
    }

    #[test]
    fn distributions() {
        let d = target_distribution(&Scenario::balanced(cfg(4, 1, 1), 1, 0)).unwrap();
        assert_eq!(d, vec![0.25; 4]);

        let d = target_distribution(&Scenario::concentrated(cfg(128, 1, 1), 1, 0.95, 1, 0)).unwrap();
        assert_eq!(d[0], 0.95);
        assert!((d[1] - 0.05 / 127.0).abs() < 1e-18);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let d = target_distribution(&Scenario::concentrated(cfg(8, 1, 1), 4, 0.5, 1, 0)).unwrap();
        assert!(d.iter().all(|&p| (p - 0.125).abs() < 1e-15));
    }

    #[test]
    fn all_hot_is_rejected() {
        let s = Scenario::concentrated(cfg(4, 1, 1), 4, 0.9, 1, 0);
        assert!(matches!(target_distribution(&s), Err(LlepError::InvalidScenario(_))));
    }

    #[test]
    fn routing_rows_are_distinct_and_deterministic() {
        let s = Scenario::concentrated(cfg(8, 3, 2), 1, 0.95, 200, 7);
        let (b1, r1) = generate_routing(&s, None).unwrap();
        let (b2, r2) = generate_routing(&s, None).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(b1, b2);
        for r in &r1 {
            for t in 0..r.num_tokens() {
                let mut row = r.row_indices(t).to_vec();
                row.sort_unstable();
                row.dedup();
                assert_eq!(row.len(), 3);
                assert!(r.row_gates(t).iter().all(|&g| g == 1.0 / 3.0));
            }
        }
    }

    #[test]
    fn hot_expert_takes_its_share_with_k1() {
        let s = Scenario::concentrated(cfg(16, 1, 1), 1, 0.95, 20_000, 3);
        let (_, r) = generate_routing(&s, None).unwrap();
        let counts = r[0].expert_counts(16).unwrap();
        let frac = counts[0] as f64 / 20_000.0;
        assert!((frac - 0.95).abs() < 0.01, "{frac}");
    }

    #[test]
    fn apportioned_rows_sum_to_slots() {
        let s = Scenario::concentrated(cfg(128, 4, 8), 1, 0.95, 1000, 0);
        let l = apportioned_loads(&s).unwrap();
        assert!(l.counts().iter().all(|r| r.iter().sum::<usize>() == 4000));
        assert_eq!(l.count(3, 0), 3800);
    }

    #[test]
    fn largest_remainder_ties_go_low() {
        assert_eq!(largest_remainder(&[0.25; 4], 2), vec![1, 1, 0, 0]);
    }
}

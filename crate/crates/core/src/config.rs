//! Layer shape, planner knobs, parameters and token batches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LlepError, Result};
use crate::tensor::Matrix;

/// Static shape of one MoE layer and its expert-parallel world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub world_size: usize,
}

impl MoeConfig {
    pub fn new(n_experts: usize, top_k: usize, d_model: usize, d_hidden: usize, world_size: usize) -> Result<Self> {
        let config = Self {
            n_experts,
            top_k,
            d_model,
            d_hidden,
            world_size,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.world_size == 0 {
            return Err(LlepError::InvalidConfig("P must be >= 1"));
        }
        if self.n_experts == 0 {
            return Err(LlepError::InvalidConfig("N must be >= 1"));
        }
        if !self.n_experts.is_multiple_of(self.world_size) {
            return Err(LlepError::InvalidConfig("N not divisible by P"));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(LlepError::InvalidConfig("K must satisfy 1 <= K <= N"));
        }
        if self.d_model == 0 {
            return Err(LlepError::InvalidConfig("D must be >= 1"));
        }
        if self.d_hidden == 0 {
            return Err(LlepError::InvalidConfig("H must be >= 1"));
        }
        Ok(())
    }

    /// `M = N / P`.
    #[inline]
    pub fn experts_per_device(&self) -> usize {
        self.n_experts / self.world_size
    }

    /// Device that statically hosts `expert`'s weights.
    #[inline]
    pub fn native_device(&self, expert: usize) -> usize {
        expert / self.experts_per_device()
    }

    pub fn native_experts(&self, device: usize) -> std::ops::Range<usize> {
        let m = self.experts_per_device();
        device * m..(device + 1) * m
    }
}

/// Knobs of the least-loaded planner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Capacity factor: a device may hold `alpha * total / P` tokens before spilling.
    pub alpha: f64,
    /// Smallest non-final spill chunk worth its own GEMM.
    pub min_chunk: usize,
    /// `max(l) / mean(l)` below this value falls back to plain expert parallelism.
    pub lambda: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            min_chunk: 1024,
            lambda: 1.3,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 1.0) {
            return Err(LlepError::InvalidConfig("alpha must be finite and >= 1"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 1.0) {
            return Err(LlepError::InvalidConfig("lambda must be finite and >= 1"));
        }
        Ok(())
    }
}

/// Checks every invariant of both configs, reporting the first violation.
pub fn validate_config(config: &MoeConfig, planner: &PlannerConfig) -> Result<()> {
    config.validate()?;
    planner.validate()
}

/// Router and expert weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `D x N`.
    pub router_weights: Matrix,
    /// `N` matrices of shape `D x H`; expert `i` lives on device `i / M`.
    pub expert_weights: Vec<Matrix>,
}

impl ModelParams {
    pub fn new(config: &MoeConfig, router_weights: Matrix, expert_weights: Vec<Matrix>) -> Result<Self> {
        let params = Self {
            router_weights,
            expert_weights,
        };
        params.check(config)?;
        Ok(params)
    }

    /// Standard normal entries scaled by `1/sqrt(D)`.
    pub fn random<R: Rng + ?Sized>(config: &MoeConfig, rng: &mut R) -> Self {
        let scale = 1.0 / (config.d_model as f64).sqrt();
        let mut scaled = |rows, cols| {
            let mut m = Matrix::random_normal(rows, cols, rng);
            for r in 0..rows {
                m.row_mut(r).iter_mut().for_each(|v| *v *= scale);
            }
            m
        };
        let router_weights = scaled(config.d_model, config.n_experts);
        let expert_weights = (0..config.n_experts)
            .map(|_| scaled(config.d_model, config.d_hidden))
            .collect();
        Self {
            router_weights,
            expert_weights,
        }
    }

    pub fn check(&self, config: &MoeConfig) -> Result<()> {
        if self.router_weights.shape() != (config.d_model, config.n_experts) {
            return Err(LlepError::shape(format!(
                "router weights {:?}, expected ({}, {})",
                self.router_weights.shape(),
                config.d_model,
                config.n_experts
            )));
        }
        if self.expert_weights.len() != config.n_experts {
            return Err(LlepError::shape(format!(
                "{} expert matrices for {} experts",
                self.expert_weights.len(),
                config.n_experts
            )));
        }
        for (i, w) in self.expert_weights.iter().enumerate() {
            if w.shape() != (config.d_model, config.d_hidden) {
                return Err(LlepError::shape(format!("expert {i} weights {:?}", w.shape())));
            }
            if !w.is_finite() {
                return Err(LlepError::shape(format!("expert {i} weights not finite")));
            }
        }
        if !self.router_weights.is_finite() {
            return Err(LlepError::shape("router weights not finite"));
        }
        Ok(())
    }
}

/// A device's local batch of hidden states, `B_p x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub device_id: usize,
    pub tokens: Matrix,
}

impl TokenBatch {
    pub fn new(device_id: usize, tokens: Matrix) -> Self {
        Self { device_id, tokens }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_config_is_valid() {
        let c = MoeConfig::new(4, 1, 2, 2, 2).unwrap();
        assert_eq!(c.experts_per_device(), 2);
        validate_config(&c, &PlannerConfig::default()).unwrap();
    }

    #[test]
    fn gpt_oss_like_config() {
        let c = MoeConfig::new(128, 4, 2048, 2048, 8).unwrap();
        assert_eq!(c.experts_per_device(), 16);
    }

    #[test]
    fn reports_divisibility_violation() {
        let err = MoeConfig::new(5, 1, 2, 2, 2).unwrap_err();
        assert_eq!(err.to_string(), "invalid config: N not divisible by P");
    }

    #[test]
    fn reports_first_violation_by_name() {
        let bad_k = MoeConfig {
            n_experts: 4,
            top_k: 5,
            d_model: 1,
            d_hidden: 1,
            world_size: 1,
        };
        assert!(matches!(
            bad_k.validate(),
            Err(LlepError::InvalidConfig("K must satisfy 1 <= K <= N"))
        ));
        let c = MoeConfig::new(4, 1, 2, 2, 2).unwrap();
        let p = PlannerConfig {
            alpha: 0.5,
            ..Default::default()
        };
        assert!(matches!(
            validate_config(&c, &p),
            Err(LlepError::InvalidConfig("alpha must be finite and >= 1"))
        ));
        let p = PlannerConfig {
            lambda: 0.9,
            ..Default::default()
        };
        assert!(validate_config(&c, &p).is_err());
    }

    #[test]
    fn native_mapping_is_total_and_even() {
        for (n, p) in [(4, 2), (128, 8), (6, 3), (7, 1)] {
            let c = MoeConfig::new(n, 1, 1, 1, p).unwrap();
            let mut per_device = vec![0; p];
            for i in 0..n {
                let d = c.native_device(i);
                assert!(d < p);
                assert!(c.native_experts(d).contains(&i));
                per_device[d] += 1;
            }
            assert!(per_device.iter().all(|&k| k == c.experts_per_device()));
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LlepError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LlepError {
    /// A configuration invariant does not hold. The payload names the invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("router overflow: non-finite logit for token {token} on device {device}")]
    RouterOverflow { device: usize, token: usize },

    #[error("expert index {expert} out of range for {n_experts} experts")]
    ExpertOutOfRange { expert: usize, n_experts: usize },

    #[error("spill with world size 1")]
    SpillWorldSizeOne,

    #[error("plan inconsistent with loads: {0}")]
    PlanInconsistent(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid cost params: {0}")]
    InvalidCostParams(String),

    #[error("unknown cost profile `{0}`")]
    UnknownProfile(String),

    #[error("workload fingerprint mismatch: {0} vs {1}")]
    FingerprintMismatch(String, String),

    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl LlepError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        LlepError::ShapeMismatch(msg.into())
    }
}

//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by mixture construction, estimation, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A mixture parameterization violated a structural invariant.
    #[error("invalid mixture spec: {0}")]
    InvalidSpec(String),

    /// Two objects that must share a dimension or component count do not.
    #[error("dimension mismatch: {context} (expected {expected}, got {actual})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// An M-step column summed to zero: no sample carries weight for the component.
    #[error("component {component} has zero total responsibility; cannot update")]
    EmptyComponent { component: usize },

    /// A cluster produced by nearest-mean assignment is empty.
    #[error("cluster {component} is empty")]
    EmptyCluster { component: usize },

    /// A cluster has fewer than two members, so no adjacent pair exists.
    #[error("cluster {component} too small for variance estimation ({size} sample(s))")]
    ClusterTooSmall { component: usize, size: usize },

    /// An argument fell outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A data file failed to parse; carries file/row context where known.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

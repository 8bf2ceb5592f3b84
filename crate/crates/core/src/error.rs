//! Crate-wide error type.

use thiserror::Error;

/// Constraint that rules out a provisioning candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BindingConstraint {
    /// Per-instance FFN latency budget exceeded (stage-time sum).
    FfnLatency,
    /// Server layer-throughput budget exceeded (max stage time times instances).
    LayerThroughput,
}

impl std::fmt::Display for BindingConstraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BindingConstraint::FfnLatency => write!(f, "ffn-latency (stage sum vs SLO_FFN)"),
            BindingConstraint::LayerThroughput => {
                write!(f, "layer-throughput (max stage x instances vs SLO_Layer)")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("infeasible: no candidate satisfies {constraint}")]
    Infeasible { constraint: BindingConstraint },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("backward requires a scalar output, node {node} has shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },

    #[error("no tensor bound for leaf `{0}`")]
    Unbound(String),

    #[error("tensor shape {shape:?} does not match data length {len}")]
    TensorLength { shape: Vec<usize>, len: usize },

    #[error("non-finite gradient for parameter `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("parameter `{param}` became non-finite at step {step}")]
    NonFiniteWeight { param: String, step: u64 },

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),

    #[error("timescale shorter than one step: eta*lambda = {rate} >= 1")]
    TimescaleTooShort { rate: f64 },

    #[error("infeasible timescale: eta*lambda = {rate} >= 1; smallest feasible tau_epoch is {min_tau_epoch}")]
    InfeasibleTauEpoch { rate: f64, min_tau_epoch: f64 },

    #[error("batch size {batch} does not divide dataset size {n}")]
    BatchDoesNotDivide { n: usize, batch: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate logits: zero variance across all elements")]
    DegenerateLogits,

    #[error("parameter `{0}` has no group classification")]
    UnclassifiedParam(String),

    #[error("no parameters selected")]
    EmptySelection,

    #[error("invalid network spec: {0}")]
    InvalidNet(String),

    #[error("Theorem-1 hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by a malformed or inconsistent configuration.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidHyperParams(_)
                | Error::InvalidNet(_)
                | Error::InvalidArgument(_)
                | Error::BatchDoesNotDivide { .. }
                | Error::TimescaleTooShort { .. }
                | Error::InfeasibleTauEpoch { .. }
                | Error::Hypothesis(_)
        )
    }
}

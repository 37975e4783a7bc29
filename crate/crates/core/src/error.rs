use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("network is not connected: node {node} unreachable from {root}")]
    Disconnected { root: String, node: String },

    #[error("singular reduced susceptance matrix (condition estimate {condition:.3e})")]
    SingularSusceptance { condition: f64 },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("injections are unbalanced: sum {sum:.6e} exceeds tolerance {tol:.3e}")]
    Unbalanced { sum: f64, tol: f64 },

    #[error("non-convex quadratic objective: coefficient {value:.3e} at variable {index}")]
    NonConvex { index: usize, value: f64 },

    /// `rows` lists constraint rows carrying the infeasibility certificate,
    /// strongest first.
    #[error("QP is infeasible ({detail})")]
    Infeasible { detail: String, rows: Vec<usize> },

    #[error("QP solver failed with status {status}")]
    Solver { status: String },

    #[error("unbounded best response for {agent}: {detail}")]
    Unbounded { agent: String, detail: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("capacity market is infeasible: {0}")]
    CapacityInfeasible(String),

    #[error("energy market nodal allocation infeasible in zone {zone}")]
    NodalAllocation { zone: String },

    #[error("ADMM oscillation detected after {iterations} iterations (no residual decrease for {window}); consider rescaling rho")]
    Oscillation { iterations: usize, window: usize },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("schema error in {path}: {problems:?}")]
    Schema { path: PathBuf, problems: Vec<String> },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

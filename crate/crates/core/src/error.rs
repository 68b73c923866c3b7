use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: line {line}, column {column}: {message}")]
    Parse {
        context: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid case: {0}")]
    Validation(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("power flow did not converge after {iterations} iterations (last update {last_update:.3e})")]
    NonConvergence { iterations: usize, last_update: f64 },

    #[error("reduced admittance matrix is singular; nodes {nodes:?} are not connected to the slack bus")]
    SingularAdmittance { nodes: Vec<usize> },

    #[error("interior block is singular; floating interior component {component:?}")]
    SingularInterior { component: Vec<usize> },

    #[error("phase set is empty")]
    EmptyPhaseSet,

    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:.3e})")]
    NonSymmetric { max_asymmetry: f64 },

    #[error("window holds {got} frames but {need} are required")]
    ShortWindow { need: usize, got: usize },

    #[error("observed node set is empty")]
    EmptyObserved,

    #[error("node {node} is outside the graph of {count} nodes")]
    NodeOutOfRange { node: usize, count: usize },

    #[error("cannot place {requested} sensors on {available} nodes")]
    TooManySensors { requested: usize, available: usize },

    #[error("series of {got} steps is too short; at least {need} are required")]
    SeriesTooShort { need: usize, got: usize },

    #[error("power flow failed at step {step}: {source}")]
    SeriesStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("loss became non-finite at epoch {epoch} (last finite loss {last_finite:.6e})")]
    NonFiniteLoss { epoch: usize, last_finite: f64 },

    #[error("inverter active output {p_actual} exceeds its rating {s_rating}")]
    InverterOverload { p_actual: f64, s_rating: f64 },

    #[error("action level {0} is not on the discrete action grid")]
    InvalidAction(f64),

    #[error("backward called on a variable that does not belong to this tape or is not a scalar")]
    DetachedGraph,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

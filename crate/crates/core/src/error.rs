use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate: lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input")]
    EmptyInput,

    #[error("non-increasing time: {prev} then {next}")]
    NonIncreasingTime { prev: i64, next: i64 },

    #[error("undefined bearing: points coincide")]
    UndefinedBearing,

    #[error("grid mismatch")]
    GridMismatch,

    #[error("features required: graph is not annotated")]
    FeaturesRequired,

    #[error("empty graph not serializable")]
    EmptyGraph,

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("empty population model")]
    EmptyPopulationModel,

    #[error("agent mismatch: test graph belongs to {test}, training graph to {train}")]
    AgentMismatch { test: String, train: String },

    #[error("missing group assignment for agents: {}", .0.join(", "))]
    MissingGroup(Vec<String>),

    #[error("undefined recall: no positive labels")]
    UndefinedRecall,

    #[error("infeasible anomaly: {0}")]
    InfeasibleAnomaly(String),

    #[error("{path}: row {row}: {message}")]
    Record { path: PathBuf, row: u64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}

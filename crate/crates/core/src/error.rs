use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used to map failures to process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("prior covariance is not symmetric positive definite")]
    NonSpdPrior,
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("network must contain at least one station")]
    EmptyNetwork,
    #[error("receiver is {distance_m} m from the source, closer than one grid cell ({min_m} m)")]
    DegenerateGeometry { distance_m: f64, min_m: f64 },
    #[error("failed to parse manifest {path}: {reason}")]
    ManifestParse { path: PathBuf, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite sample in station {station} at row {row}")]
    NonFiniteSample { station: usize, row: usize },
    #[error("duplicate station id {0}")]
    DuplicateStation(usize),
    #[error("k = {k} exceeds the {n} available candidates")]
    KTooLarge { k: usize, n: usize },
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("scenario {scenario} has no forward data for {missing} candidate(s)")]
    ScenarioForwardMissing { scenario: String, missing: usize },
    #[error("C({n}, {k}) = {count} subsets exceeds the exhaustive-search guard of {limit}")]
    CombinatorialBlowup { n: usize, k: usize, count: f64, limit: f64 },
    #[error("inconsistent inputs: {0}")]
    InconsistentInputs(String),
    #[error("invalid grid extent: {0}")]
    InvalidExtent(String),
    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Wraps the error with provenance (which scenario, which stage).
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::NonSpdPrior | Error::NumericalBreakdown(_) => ErrorCategory::Numerical,
            Error::Io { .. } => ErrorCategory::Io,
            Error::Context { source, .. } => source.category(),
            _ => ErrorCategory::Config,
        }
    }
}

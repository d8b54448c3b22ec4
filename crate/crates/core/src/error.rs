use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss ({0})")]
    NonFiniteLoss(f64),

    #[error("forward cache does not belong to these parameters")]
    StaleCache,

    #[error("batch normalization needs at least 2 rows in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("client weights sum to {0}, expected 1")]
    WeightSumViolation(f64),

    #[error("feddyn requires a gradient memory")]
    MissingDynMemory,

    #[error("every client diverged in round {0}")]
    AllClientsDiverged(usize),

    #[error("adaptive server optimizer state is not initialized")]
    UninitializedOptState,

    #[error("infeasible client sizes: {0}")]
    InfeasibleSizes(String),

    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invalid config at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("both classes are required, got a single class")]
    SingleClass,

    #[error("rank test needs non-empty samples")]
    EmptySample,

    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable, machine-readable name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFiniteLoss(_) => "non_finite_loss",
            Error::StaleCache => "stale_cache",
            Error::DegenerateBatch(_) => "degenerate_batch",
            Error::KeyMismatch(_) => "key_mismatch",
            Error::WeightSumViolation(_) => "weight_sum_violation",
            Error::MissingDynMemory => "missing_dyn_memory",
            Error::AllClientsDiverged(_) => "all_clients_diverged",
            Error::UninitializedOptState => "uninitialized_opt_state",
            Error::InfeasibleSizes(_) => "infeasible_sizes",
            Error::MalformedRow { .. } => "malformed_row",
            Error::SchemaMismatch(_) => "schema_mismatch",
            Error::Config { .. } => "config",
            Error::SingleClass => "single_class",
            Error::EmptySample => "empty_sample",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

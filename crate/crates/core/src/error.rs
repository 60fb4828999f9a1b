use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("matrix is not positive definite: pivot {pivot} has value {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("singular triangular system: zero diagonal at index {index}")]
    Singular { index: usize },

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("unsupported Matern order nu = {0} (supported: 0.5, 1.5, 2.5)")]
    UnsupportedOrder(f64),

    #[error("dataset is empty")]
    EmptyData,

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("ensemble member {member} failed: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("network has no dropout layers")]
    NoDropout,

    #[error("oracle failed at iteration {iteration}: {message}")]
    Oracle { iteration: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("csv error at row {row}, column {column}: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_) | Error::UnsupportedOrder(_) | Error::InvalidHyperparameter(_) => 2,
            Error::Csv { .. }
            | Error::MissingColumn(_)
            | Error::EmptyData
            | Error::TooFewSamples { .. }
            | Error::DimensionMismatch { .. }
            | Error::Io(_)
            | Error::Json(_) => 3,
            Error::Divergence { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::Singular { .. } => 4,
            Error::Member { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "schema",
            3 => "data",
            4 => "numeric",
            _ => "runtime",
        }
    }
}

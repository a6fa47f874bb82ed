use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("element {index} has non-positive measure {measure:e}")]
    DegenerateElement { index: usize, measure: f64 },

    #[error("neighbourhood order must be at least 1")]
    ZeroOrder,

    #[error("stiffness matrix is singular: {0}")]
    SingularSystem(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("Cholesky factorisation failed after adding jitter {jitter:e}")]
    Cholesky { jitter: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("PDE solve failed for sample {index}: {source}")]
    SampleFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("total boundary flux {0:e} is not positive, its logarithm is undefined")]
    NonPositiveFlux(f64),

    #[error("sample covariance is singular; pass a positive ridge")]
    SingularCovariance,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data mismatch: {0}")]
    DataMismatch(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(what: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch { what, expected, got }
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::InvalidMesh(_)
            | Error::ZeroOrder => 2,
            Error::DataMismatch(_) | Error::DimensionMismatch { .. } => 4,
            _ => 3,
        }
    }
}

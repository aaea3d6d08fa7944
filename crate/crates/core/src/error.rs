use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("non-positive level {value} in column `{column}` for firm {firm}, period {period}")]
    Domain {
        firm: String,
        period: i64,
        column: String,
        value: f64,
    },

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("total kernel weight is zero")]
    ZeroWeight,

    #[error("singular weighted design (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that originate in the numerics rather than in the
    /// supplied data or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ZeroWeight | Error::Singular { .. } | Error::NonFinite(_) | Error::Estimation(_)
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Domain { .. } => "domain",
            Error::MissingColumn(_) => "missing_column",
            Error::Integrity(_) => "integrity",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ZeroWeight => "zero_weight",
            Error::Singular { .. } => "singular",
            Error::NonFinite(_) => "non_finite",
            Error::Estimation(_) => "estimation",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

use thiserror::Error;

/// Every failure the toolkit reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: field `{field}`: {message}")]
    Row {
        row: usize,
        field: String,
        message: String,
    },

    #[error("unknown format `{0}` (expected csv or jsonl)")]
    UnknownFormat(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("missing unique-token count for language `{0}` in corpus catalog")]
    MissingCatalogEntry(String),

    #[error("run `{run_id}` is not evaluable: {message}")]
    NotEvaluable { run_id: String, message: String },

    #[error("too few observations: need at least {required}, got {got}")]
    TooFewObservations { required: usize, got: usize },

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("empty {side} side after `{axis}` split")]
    EmptySplit { axis: String, side: &'static str },

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("tokens {tokens} outside curve range [{first}, {last}]")]
    OutOfRange { tokens: f64, first: f64, last: f64 },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("axis `{axis}`: {source}")]
    Axis {
        axis: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn row(row: usize, field: &str, message: impl Into<String>) -> Self {
        Error::Row {
            row,
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn domain(message: impl Into<String>) -> Self {
        Error::Domain(message.into())
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }
}

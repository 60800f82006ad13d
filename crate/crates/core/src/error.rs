use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("separability condition violated: g*min(D_f) = {lhs} < (1-g)*max(D_h) = {rhs}")]
    Separability { lhs: f64, rhs: f64 },

    #[error("sampler configuration: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("line {line}: {message}")]
    Format { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input data rather than bad arguments.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidDistribution(_)
                | Error::Shape(_)
                | Error::Data(_)
                | Error::Format { .. }
                | Error::Json(_)
                | Error::Separability { .. }
                | Error::UndefinedMetric(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

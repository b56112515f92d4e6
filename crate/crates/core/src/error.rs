use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data error: {0}")]
    Data(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Data(_) => "data",
            Error::MissingColumn(_) => "missing_column",
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Numerical(_) => "numerical",
            Error::Estimation(_) => "estimation",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    /// True for failures caused by malformed input rather than the estimator.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Data(_) | Error::MissingColumn(_) | Error::Config(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

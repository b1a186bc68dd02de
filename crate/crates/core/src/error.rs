use crate::biomarkers::QcVerdict;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad hyperparameter, dimension mismatch or otherwise malformed setup.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data outside its documented domain.
    #[error("validation error: {0}")]
    Validation(String),

    /// A volume curve failed the physiological screen.
    #[error("quality control rejected curve: {0:?}")]
    QcRejected(QcVerdict),

    /// Training diverged or produced non-finite values.
    #[error("training aborted: {0}")]
    Training(String),

    /// A serialized artifact carries an unsupported schema version.
    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for usage/input problems,
    /// 3 for artifact-version mismatches, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::QcRejected(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Toml(_) => 2,
            Error::SchemaVersion { .. } => 3,
            Error::Training(_) => 1,
        }
    }
}

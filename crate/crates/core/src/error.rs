use std::fmt;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch ({detail})")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("conversion error: no calibration stats for site `{0}`")]
    MissingSite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl fmt::Display) -> Self {
        Error::Dimension {
            op,
            detail: detail.to_string(),
        }
    }

    /// True for errors caused by user-supplied configuration rather than a
    /// failure while running a stage.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Parameter(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

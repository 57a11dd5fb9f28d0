use std::path::PathBuf;

/// Errors raised across the toolkit. Each variant belongs to one error family,
/// which the CLI maps onto a distinct process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("lissa diverged (sigma = {sigma}): {detail}")]
    Divergence { sigma: f64, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("corpus is empty after filtering")]
    EmptyCorpus,
    #[error("clean validation set is empty")]
    EmptyCleanSet,
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error's family. Zero is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 2,
            Error::Io { .. } => 3,
            Error::Format(_) | Error::Json(_) => 4,
            Error::EmptyCorpus | Error::EmptyCleanSet => 5,
            Error::NumericalFailure(_) | Error::DegenerateVector(_) => 6,
            Error::Divergence { .. } => 7,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

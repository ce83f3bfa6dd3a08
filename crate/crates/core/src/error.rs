use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// The variants line up with the exit-code classes of the command line tool:
/// I/O and configuration problems, compatibility mismatches, and everything
/// else (contract violations, numeric failures).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unknown label {0:?}")]
    Vocabulary(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("incompatible artifact: {0}")]
    Compat(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

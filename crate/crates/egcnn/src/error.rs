use thiserror::Error;

/// Crate-wide error type.
///
/// `Contract` covers violated preconditions, `Verification` covers failed
/// numerical checks (gradient checker, invariant suites); the CLI maps the
/// two to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI: verification failures are distinguished from
    /// contract/usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Verification(_) => 3,
            _ => 2,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

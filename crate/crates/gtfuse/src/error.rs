use std::path::PathBuf;

/// Errors surfaced by file handling and the command-line driver.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed JSON; `offset` is the byte position of the failure.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    /// Well-formed JSON that does not follow the annotation layout.
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Core(#[from] gtfuse_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status for the error: 2 validation, 3 infeasible, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 4,
            Error::Core(gtfuse_core::Error::Infeasible(_)) => 3,
            _ => 2,
        }
    }
}

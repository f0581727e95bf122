use std::io;
use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),

    #[error("{}: {detail}", path.display())]
    Config { path: PathBuf, detail: String },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },

    #[error(transparent)]
    Core(#[from] feddom_core::Error),
}

impl Error {
    pub fn config(path: &Path, detail: impl Into<String>) -> Self {
        Error::Config { path: path.to_path_buf(), detail: detail.into() }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    /// Process exit status: 1 usage, 2 configuration or input, 3 runtime divergence.
    pub fn exit_code(&self) -> i32 {
        use feddom_core::Error as E;
        match self {
            Error::Usage(_) => 1,
            Error::Config { .. } | Error::Io { .. } | Error::Csv { .. } => 2,
            Error::Core(e) => match e {
                E::Usage(_) => 1,
                E::Config(_) | E::Format { .. } | E::Io(_) => 2,
                E::Divergence { .. } | E::Numeric { .. } | E::Shape { .. } | E::Degenerate(_) => 3,
            },
        }
    }
}

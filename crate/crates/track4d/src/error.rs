use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] track4d_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// A schema or invariant violation located by JSON path.
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },

    #[error("{}: {source}", file.display())]
    InFile {
        file: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("verification failed: {0}")]
    Verification(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Attaches the file the error came from.
    pub fn in_file(self, file: &Path) -> Self {
        match self {
            e @ (Error::Io { .. } | Error::InFile { .. }) => e,
            e => Error::InFile {
                file: file.to_path_buf(),
                source: Box::new(e),
            },
        }
    }

    fn root(&self) -> &Error {
        match self {
            Error::InFile { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit status: 3 for numerical divergence, 4 for failed
    /// verification, 2 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self.root() {
            Error::Core(track4d_core::Error::Diverged { .. }) => 3,
            Error::Verification(_) => 4,
            _ => 2,
        }
    }
}

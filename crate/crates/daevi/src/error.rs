use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] daevi_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: format error at byte {offset}: {detail}")]
    Format { path: PathBuf, offset: u64, detail: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status: 1 usage or configuration, 2 data or format,
    /// 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use daevi_core::Error as C;
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Core(C::Config(_)) => 1,
            Error::Numerical(_) | Error::Core(C::NonFinite { .. }) => 3,
            Error::Io { .. } | Error::Format { .. } | Error::Core(_) => 2,
        }
    }
}

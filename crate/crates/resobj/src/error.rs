use std::path::PathBuf;

/// Failures of the IO layer and CLI, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] resobj_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: format error: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("{}: invalid config: {detail}", path.display())]
    Config { path: PathBuf, detail: String },
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const NUMERIC: i32 = 2;
    pub const FORMAT: i32 = 3;
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        use resobj_core::Error as C;
        match self {
            Self::Usage(_) | Self::Config { .. } | Self::Core(C::Config(_)) => exit::USAGE,
            Self::Format { .. } | Self::Io { .. } => exit::FORMAT,
            Self::Core(C::ParamShape { .. } | C::MissingParam(_)) => exit::FORMAT,
            Self::Core(_) | Self::GradCheck(_) => exit::NUMERIC,
        }
    }
}

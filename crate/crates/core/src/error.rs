use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no tactile data")]
    NoTactileData,

    #[error("normal {index} is not unit length (norm {norm})")]
    NonUnitNormal { index: usize, norm: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("kernel matrix not positive definite")]
    NotPositiveDefinite,

    #[error("conditioning set has {count} points, cap is {cap}; use a coarser voxel pitch")]
    OverCap { count: usize, cap: usize },

    #[error("rank-deficient alignment: {0}")]
    RankDeficient(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("optimization diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("{path}:{line}: {message}")]
    Config {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("stage `{stage}` is missing {artifact}; run stage `{upstream}` first")]
    MissingUpstream {
        stage: String,
        upstream: String,
        artifact: PathBuf,
    },

    #[error("output directory {0} is locked by another pipeline run")]
    Locked(PathBuf),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

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

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2 = configuration error, 3 = stage dependency error, 4 = numerical
    /// failure, 1 = anything else (I/O, malformed files, lock contention).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::MissingUpstream { .. } => 3,
            Error::NotPositiveDefinite
            | Error::Numerical(_)
            | Error::Diverged { .. }
            | Error::RankDeficient(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

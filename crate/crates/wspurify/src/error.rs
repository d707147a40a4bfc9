use std::path::PathBuf;

use crate::container::FormatError;
use crate::resolver::RuleError;

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const INPUT: i32 = 2;
    pub const NO_BOUNDARY: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] wspurify_core::Error),
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error("{} pair(s) failed:\n  {}", .0.len(), .0.join("\n  "))]
    Pairs(Vec<String>),
    #[error("{}: {what}", path.display())]
    Invalid { path: PathBuf, what: String },
    #[error("no boundary layer detected (scores {scores:?}); pass --boundary-override to purify anyway")]
    NoBoundary { scores: Vec<f64> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use wspurify_core::Error as E;
        match self {
            Error::NoBoundary { .. } => exit::NO_BOUNDARY,
            Error::Core(
                E::NonFinite { .. }
                | E::SvdFailure { .. }
                | E::NoConvergence { .. }
                | E::DegenerateCovariance
                | E::PlantingFailed { .. },
            ) => exit::NUMERIC,
            _ => exit::INPUT,
        }
    }
}

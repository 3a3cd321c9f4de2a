//! File formats and command-line driver for `moda-core`.
//!
//! Exit codes returned by [`cli::run`]:
//!
//! | code | meaning                                        |
//! |------|------------------------------------------------|
//! | 0    | success                                        |
//! | 1    | internal numerical error                       |
//! | 2    | bad config, bad arguments or malformed input   |
//! | 3    | training loss diverged                         |
//! | 4    | file could not be read or written              |

use std::path::PathBuf;

pub mod cli;
pub mod config;
pub mod export;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("malformed input {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("loss diverged at step {step}")]
    Diverged { step: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(moda_core::Error),
}

impl From<moda_core::Error> for Error {
    fn from(e: moda_core::Error) -> Self {
        match e {
            moda_core::Error::DivergedLoss { step } => Error::Diverged { step },
            moda_core::Error::InvalidConfig(msg) => Error::Config(msg),
            other => Error::Core(other),
        }
    }
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(_) => 1,
            Error::Config(_) | Error::Format { .. } => 2,
            Error::Diverged { .. } => 3,
            Error::Io { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

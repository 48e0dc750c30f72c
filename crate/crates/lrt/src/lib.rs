//! Standard-library companion to `lrt-core`: run configuration files,
//! checkpoints, the training driver, ablation tables, the oracle suite and
//! the `lrt` command line.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod oracle;
pub mod run;

use std::path::PathBuf;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {}", .0.display(), .1)]
    Io(PathBuf, std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Core(#[from] lrt_core::Error),
}


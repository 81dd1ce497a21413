//! Experiment runner around `cotasim-core`: config loading, corpus
//! generation, runs, sweeps, report export and trace dumps.

pub mod config;
pub mod corpus;
pub mod report;
pub mod run;
pub mod sweep;
pub mod trace;

use std::path::{Path, PathBuf};

use cotasim_core::decoder::DecodeError;
use cotasim_core::model::ModelError;
use thiserror::Error;

pub use config::ExperimentConfig;
pub use run::{run, RunManifest};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("sweep has {points} points, more than max_points = {max}")]
    SweepTooLarge { points: usize, max: usize },
    #[error("malformed run output: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

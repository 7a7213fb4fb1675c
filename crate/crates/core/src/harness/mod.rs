//! Experiment runner and evaluation metrics.

pub mod experiment;
pub mod fidelity;
pub mod metrics;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::belief::BeliefError;
use crate::dataset::DataError;
use crate::engine::EngineError;
use crate::surrogate::SurrogateError;

pub use experiment::{
    build_report, read_trajectories, render_text, run_experiment, write_report, ExperimentConfig,
    ExperimentOutput, MetricsReport,
};
pub use fidelity::{sample_fidelity, write_fidelity, FidelityReport};
pub use metrics::MetricsError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Config(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

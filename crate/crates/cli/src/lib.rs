//! Experiment runner behind the `hcot` binary.
//!
//! Exit codes: 2 invalid configuration, 3 missing or malformed data,
//! 4 numerical failure during training, 1 anything else (I/O).

pub mod config;
pub mod run;

use std::path::PathBuf;

use hcot_core::data::DataError;
use hcot_core::hierarchy::HierarchyError;
use hcot_core::metrics::MetricsError;
use hcot_core::network::NetworkError;
use hcot_core::trainer::TrainError;
use thiserror::Error;

pub use config::{DataConfig, ExperimentConfig, HierarchySource, NetworkConfig};
pub use run::{
    ablate_nc, compare, evaluate_checkpoint, export_embeddings, prepare_out_dir, run_experiment,
    AblationRow, CompareRow, LoadedData, RunOutcome,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("hierarchy {source_name}: {error}")]
    Hierarchy {
        source_name: String,
        error: HierarchyError,
    },
    #[error("output directory {0} already exists and is not empty (pass --force to overwrite)")]
    OutputExists(PathBuf),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("numerical failure: {0}")]
    NonFinite(String),
    #[error("training: {0}")]
    Train(TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{path}: {error}")]
    Io {
        path: PathBuf,
        error: std::io::Error,
    },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Hierarchy { .. } | RunError::OutputExists(_) => 2,
            RunError::Data(_) => 3,
            RunError::NonFinite(_) => 4,
            RunError::Metrics(MetricsError::Data(_)) => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> RunError {
        let path = path.into();
        move |error| RunError::Io { path, error }
    }
}

impl From<TrainError> for RunError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => RunError::NonFinite(e.to_string()),
            TrainError::InvalidConfig(msg) => RunError::Config(msg),
            TrainError::Data(d) => RunError::Data(d),
            other => RunError::Train(other),
        }
    }
}

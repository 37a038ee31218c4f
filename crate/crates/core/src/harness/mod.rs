//! Dataset generation and persistence, baseline and network evaluation,
//! experiment sweeps, transfer runs, and plot rendering.

mod dataset;
mod experiment;
mod plot;
mod scene;
mod sweep;

pub use dataset::{
    generate_dataset, read_dataset, with_pilots, write_dataset, Dataset, DatasetHeader, DatasetSpec, Splits,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use experiment::{parse_config, ExperimentConfig};
pub use plot::{emit_plot, PlotKind};
pub use scene::ScenePreset;
pub use sweep::{
    eval_nmse, ls_estimates, omp_estimates, rows_csv, sweep_pilots, sweep_snr, train_pinn, transfer_csv,
    transfer_experiment, Method, SweepRow, TransferRow,
};

use crate::channel_model::ChannelError;
use crate::estimation::EstimationError;
use crate::pinn::PinnError;
use crate::propagation::PropagationError;
use midband_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("scene {0} has no reachable receiver positions")]
    NoReachablePositions(String),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error("csv does not match the plot kind: {0}")]
    Schema(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Pinn(#[from] PinnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for numeric
    /// faults, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Pinn(PinnError::InvalidConfig(_)) => 2,
            HarnessError::Pinn(PinnError::Diverged { .. }) => 3,
            HarnessError::Pinn(PinnError::Autodiff(AutodiffError::NumericFault { .. })) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

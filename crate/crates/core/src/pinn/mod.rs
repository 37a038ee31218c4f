//! Physics-informed refinement network: model definition, losses,
//! optimizer, training loops and complexity accounting.

mod adam;
mod complexity;
mod config;
mod data;
mod gradcheck;
mod loss;
mod metrics;
mod model;
mod params;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use complexity::{count_params_flops, Complexity, LayerCost};
pub use config::{Init, ModelConfig, ParamSpec, TrainConfig};
pub use data::{norm_constant, Batch, PreparedSet, Sample, SampleMeta};
pub use gradcheck::{batch_loss, end_to_end_grad_check, randomized_params, synthetic_batch};
pub use loss::{nmse_loss, phy_loss, total_loss, LossTerms};
pub use metrics::{summarize_nmse, to_db, NmseSummary, NMSE_FLOOR_DB};
pub use model::{
    channel_to_planes, cross_attention, decode, encode, forward, planes_to_channel, rss_encoder,
    transformer_latent, ForwardTrace, ForwardVars,
};
pub use params::{ModelParams, ParamVars, TrainedModel, NORM_ENTRY};
pub use train::{
    evaluate, fine_tune, per_sample_nmse, phy_residuals, refine, train, train_from, train_observed,
    EpochStats, FineTunePoint, TrainReport,
};

use crate::channel_model::ChannelError;
use midband_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PinnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("RSS patch side {0} is below the minimum of 4")]
    PatchTooSmall(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize },
}

pub type Result<T> = std::result::Result<T, PinnError>;

/// Single-precision parameters, the training precision.
pub type ModelParams32 = ModelParams<f32>;
/// Double-precision parameters, used by gradient checks.
pub type ModelParams64 = ModelParams<f64>;

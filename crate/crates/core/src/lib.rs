//! Mid-band MIMO channel estimation: multipath channel synthesis, ray traced
//! received signal strength maps, pilot based baselines, and a physics
//! informed refinement network trained with a hand-written autodiff engine.

pub mod channel_model;
pub mod estimation;
pub mod harness;
pub mod pinn;
pub mod propagation;

pub use midband_autodiff::Real;

pub type ChannelTensor32 = channel_model::ChannelTensor<f32>;
pub type ChannelTensor64 = channel_model::ChannelTensor<f64>;
pub type PathSet64 = channel_model::PathSet<f64>;

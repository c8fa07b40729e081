//! Reference-conditioned image composition with calibrated reference features.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases at the crate root name the common instantiations.

pub mod autograd;
pub mod calibration;
pub mod checkpoint;
pub mod config;
pub mod correspondence;
pub mod denoiser;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod plot;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Single-precision model, the default for training and composing.
pub type Model32 = model::Model<f32>;
/// Double-precision model, used by gradient checks and oracles.
pub type Model64 = model::Model<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;

/// Tool version stamped into checkpoints and reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

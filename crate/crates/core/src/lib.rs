//! Few-step generative flows on toy data: an autodiff engine, a conditional
//! velocity network, Flow Matching / MeanFlow / consistency objectives,
//! samplers, metrics and a reproducible experiment harness.

pub mod autodiff;
mod error;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod samplers;
pub mod schedules;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TensorF32 = autodiff::Tensor<f32>;
pub type TensorF64 = autodiff::Tensor<f64>;
pub type GraphF32 = autodiff::Graph<f32>;
pub type GraphF64 = autodiff::Graph<f64>;
pub type VelocityNetF32 = network::VelocityNet<f32>;
pub type VelocityNetF64 = network::VelocityNet<f64>;

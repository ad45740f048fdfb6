//! Simulation toolkit for crossbar-based neural-network accelerators built on
//! emerging memory devices.
//!
//! * [`device`]: stateless conductance-update models and the weight, conductance
//!   and pulse conversions.
//! * [`quant`]: low-bit quantizers for weights, activations, gradients and errors.
//! * [`nn`]: a small dense-network engine with software and device-mediated training.
//! * [`decomp`]: low-rank gradient approximations (SVD, NMF, streaming PCA).
//! * [`landscape`]: loss surfaces and trajectory PCA.
//! * [`xbar`]: stateful crossbar inference with noise, faults and redundancy,
//!   plus a stateless streaming mode.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the scalar for common uses.

pub mod decomp;
pub mod device;
pub mod error;
pub mod landscape;
pub mod linalg;
pub mod nn;
pub mod quant;
pub mod rng;
mod scalar;
pub mod xbar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
pub type Dataset32 = nn::Dataset<f32>;
pub type Dataset64 = nn::Dataset<f64>;
pub type TrainConfig32 = nn::TrainConfig<f32>;
pub type TrainConfig64 = nn::TrainConfig<f64>;
pub type DeviceModel32 = device::DeviceModel<f32>;
pub type DeviceModel64 = device::DeviceModel<f64>;
pub type TabularModel32 = device::TabularModel<f32>;
pub type TabularModel64 = device::TabularModel<f64>;
pub type AnalyticalModel32 = device::AnalyticalModel<f32>;
pub type AnalyticalModel64 = device::AnalyticalModel<f64>;
pub type Accelerator32 = xbar::CrossbarAccelerator<f32>;
pub type Accelerator64 = xbar::CrossbarAccelerator<f64>;
pub type AcceleratorConfig32 = xbar::AcceleratorConfig<f32>;
pub type AcceleratorConfig64 = xbar::AcceleratorConfig<f64>;
pub type LowRankGradient32 = decomp::LowRankGradient<f32>;
pub type LowRankGradient64 = decomp::LowRankGradient<f64>;

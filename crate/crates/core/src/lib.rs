//! Traffic speed forecasting on road networks with a capacity-driven
//! attention graph convolution.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff
//! engine ([`tensor`]), road graphs and hop rings ([`graph`]), a synthetic
//! incident-aware traffic generator ([`synth`]), CSV ingestion and
//! windowing ([`dataset`]), the traffic attention block ([`tab`]), temporal
//! and graph convolution layers ([`layers`]), the assembled forecasters
//! ([`model`]), training and metrics ([`train`]), checkpoints
//! ([`checkpoint`]) and post-hoc weight/attention analysis ([`analysis`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the tools use.

pub mod analysis;
pub mod checkpoint;
mod csvio;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod layers;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tab;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type Params = model::ModelParams<f64>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;
pub type TrainOutcome = train::TrainOutcome<f64>;

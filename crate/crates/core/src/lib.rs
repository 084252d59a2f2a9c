//! Packet-payload intrusion detection: capture ingestion, byte-histogram
//! images, a small CNN engine, one-vs-all base learners and an integrated
//! stacking model whose frozen trunks feed a trainable meta head.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the single-precision instantiation used by the CLI.

pub mod config;
pub mod eval;
pub mod ingest;
pub mod learner;
pub mod nn;
pub mod scalar;
pub mod stack;
pub mod synth;
pub mod train;
pub mod transform;

pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Graph32 = nn::ModelGraph<f32>;
pub type Graph64 = nn::ModelGraph<f64>;
pub type BaseLearner32 = learner::BaseLearner<f32>;
pub type BaseLearner64 = learner::BaseLearner<f64>;
pub type IntegratedModel32 = stack::IntegratedModel<f32>;
pub type IntegratedModel64 = stack::IntegratedModel<f64>;

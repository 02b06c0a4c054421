//! Probabilistic audio-driven holistic motion synthesis at desk scale.
//!
//! The crate is organized as a three-stage pipeline over a synthetic corpus:
//!
//! * [`pqvae`] compresses motion into a grid of product-quantized codes,
//! * [`predictor`] fills masked code grids from audio, motion context and
//!   speaker identity with confidence-ranked iterative decoding,
//! * [`refiner`] restores high-frequency detail of the decoded motion.
//!
//! [`pipeline`] wires the stages together and [`eval`] holds the metrics.

pub(crate) mod binio;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod motion;
pub mod numerics;
pub mod pipeline;
pub mod pqvae;
pub mod predictor;
pub mod refiner;
pub mod report;
pub mod rng;
pub mod transformer;

pub use error::{Error, Result};

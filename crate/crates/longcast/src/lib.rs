//! Long-sequence time-series forecasting engine.
//!
//! The crate implements an encoder-decoder forecaster built around three
//! ideas: probability-sparse self-attention (exact attention only for the
//! queries whose score distribution is far from uniform), self-attention
//! distilling (conv + pool halving of the time axis between encoder
//! layers), and one-shot generative decoding of the whole prediction
//! window. A small dense-tensor engine with reverse-mode automatic
//! differentiation provides the training substrate, and the `bench`
//! module carries the instrumentation that verifies the complexity and
//! statistical claims behind the design.

pub mod attention;
pub mod bench;
pub mod data;
pub mod decoder;
pub mod embedding;
pub mod encoder;
mod error;
pub mod model;
pub mod probe;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Rng, Scalar, Tensor};

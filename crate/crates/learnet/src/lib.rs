//! Feed-forward one-shot learners.
//!
//! This crate implements networks that predict the parameters of a pupil
//! network from a single exemplar image. A meta-network maps the exemplar to
//! the weights of a dynamic (parameter-predicted) layer inside an embedding
//! stream; factorizing that layer keeps the prediction head linear in the
//! number of channels instead of quadratic. Everything is built on a small
//! dense-tensor reverse-mode autodiff engine and trained with plain SGD on
//! labeled (exemplar, candidate) triplets.
//!
//! Modules:
//! - [`tensor`] / [`autodiff`]: dense tensors, layer kernels, reverse-mode
//!   differentiation, and a finite-difference gradient checker.
//! - [`layers`]: static, factorized, and parameter-predicted layers, plus
//!   the basis-filter expansion that maps a factorized convolution back to
//!   an equivalent general filter bank.
//! - [`networks`]: embedding streams, meta-networks, comparison functions,
//!   and the five experimental architectures.
//! - [`train`]: triplet sampling, logistic objectives, SGD with geometric
//!   learning-rate decay and weight decay.
//! - [`data`]: character datasets (PGM trees or synthetic glyphs) and
//!   synthetic tracking sequences with crop construction.
//! - [`evaluation`]: 20-way one-shot recognition, a miniature sequential
//!   tracker, and displacement / pair-classification metrics.
//! - [`model_io`]: deterministic binary model serialization.
//! - [`config`]: strict JSON run configuration shared with the CLI.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod layers;
pub mod model_io;
pub mod networks;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;

/// Crate-wide error type; the CLI maps variants onto stable exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("model file error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

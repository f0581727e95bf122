//! Desk-scale simulator for cross-domain federated training of a learned
//! joint source-channel image codec.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`params`] and [`checkpoint`] form a minimal
//!   reverse-mode autodiff stack with flat parameter handling.
//! * [`model`] holds the convolutional encoder/decoder pair and the feature head.
//! * [`channel`] simulates power normalisation, AWGN and block Rayleigh fading.
//! * [`data`] generates or loads per-domain images and partitions them over clients.
//! * [`fl`] runs federated rounds (FedAvg, FedProx, MOON and FedDoM).
//! * [`metrics`] and [`analysis`] evaluate reconstructions and convergence.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod channel;
pub mod checkpoint;
pub mod data;
pub mod eval;
mod error;
pub mod fl;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;

/// Scalar type used for training runs. Gradient checks instantiate the same
/// code with `f64`.
pub type TrainScalar = f32;

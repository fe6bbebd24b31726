//! Desk-scale face identification pipeline: a locally-connected CNN trained by
//! SGD on cross-entropy, bottleneck feature embeddings, hyperplane-based
//! bootstrapping of hard identity sets, representation-norm diagnostics, and
//! probe-gallery evaluation protocols.
//!
//! All numeric kernels are generic over the scalar type ([`Scalar`], `f32` or
//! `f64`). Training runs in `f32`; `f64` is used where verification demands it
//! (finite-difference gradient checks). Every operation is deterministic given
//! its seed: reruns produce byte-identical artifacts.

pub mod bootstrap;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod io;
pub mod features;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod svm;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Opaque identifier of a single image, `"<identity>/<name>"` by convention.
pub type ImageId = String;
/// Opaque identifier of an identity (class).
pub type IdentityId = String;

/// Concrete aliases for the training precision.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Network32 = nn::Network<f32>;
pub type Embedding32 = features::Embedding<f32>;
pub type HyperplaneModel32 = bootstrap::HyperplaneModel<f32>;

/// Concrete aliases for the verification precision.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Network64 = nn::Network<f64>;
pub type Embedding64 = features::Embedding<f64>;

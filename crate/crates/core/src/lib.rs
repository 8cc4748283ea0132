//! Hypernetworks that generate small, interpretable MLPs computing the L1
//! norm, plus everything needed to study what they generate: analytic
//! reference constructions of the known algorithms, order parameters and a
//! calibrated classifier, and force-directed drawings of the networks.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the scalar to `f64`, which is what training, checkpoints and
//! the experiment commands use.

// `!(x > 0.0)` rejects NaN on purpose; tape ops return `Result`, so they
// cannot be the std operator traits.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod analysis;
pub mod constructors;
pub mod contour;
pub mod error;
pub mod experiments;
pub mod hypernet;
pub mod layout;
pub mod network;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;

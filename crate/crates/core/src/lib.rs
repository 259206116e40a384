//! locus-core: unsupervised object landmark discovery by conditional image
//! generation through a keypoint bottleneck.
//!
//! A landmark detector is trained jointly with a conditional generator: the
//! generator must reproduce a target image given (a) appearance features of a
//! source image and (b) the target's geometry squeezed through K soft-argmax
//! keypoints re-rendered as Gaussian heatmaps. Minimizing reconstruction error
//! forces the keypoints to encode object geometry, with no annotations.
//!
//! The numeric core is generic over the scalar type ([`Scalar`], f32 or f64);
//! training runs at f32, gradient checks at f64.

pub mod bottleneck;
pub mod checkpoint;
pub mod error;
pub mod config;
pub mod data;
pub mod eval;
pub mod figures;
pub mod gradcheck;
pub mod imgio;
pub mod loss;
pub mod nets;
pub mod scalar;
pub mod trainer;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Point, Tensor};

/// Default training scalar.
pub type F = f32;
/// Tensor at training precision.
pub type Tensor32 = Tensor<f32>;
/// Tensor at gradient-check precision.
pub type Tensor64 = Tensor<f64>;

//! Binarized convolutional networks with Elastic-Link real-valued shortcuts.
//!
//! The engine is generic over the real scalar type (`f32` or `f64`); the
//! aliases below pin the common instantiations.

pub mod binarize;
pub mod binconv;
pub mod config;
pub mod conv;
pub mod elastic_link;
pub mod error;
pub mod model;
pub mod norm;
pub mod oracle;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{BitTensor, Shape4, Tensor};

/// The 32-bit real tensor used throughout production code.
pub type DenseTensor = Tensor<f32>;
pub type DenseTensor64 = Tensor<f64>;

pub type Network = model::LayerGraph<f32>;
pub type Network64 = model::LayerGraph<f64>;

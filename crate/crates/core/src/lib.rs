//! Weakly supervised video anomaly detection with temporal context
//! aggregation and prompt-enhanced learning.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Tests and
//! gradient checks run in `f64`; the training and scoring commands default to
//! `f32`. Concrete aliases for both are exported below.

pub mod error;
pub mod eval;
pub mod featio;
pub mod head;
pub mod model;
pub mod numkit;
pub mod pel;
pub mod prompt;
pub mod scalar;
pub mod tca;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = numkit::Tensor<f32>;
pub type Tensor64 = numkit::Tensor<f64>;
pub type Graph32 = numkit::Graph<f32>;
pub type Graph64 = numkit::Graph<f64>;
pub type ParamSet32 = numkit::ParamSet<f32>;
pub type ParamSet64 = numkit::ParamSet<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;

//! Self-supervised feature-map masking for image classification.
//!
//! A small reverse-mode autodiff engine drives a residual network whose last
//! two stage outputs are masked by quadrant and classified by joint
//! `(class, mask)` heads. The crate covers training, the single, aggregated
//! and self-distillation inference rules, dataset loading, checkpoints, cost
//! accounting and class activation maps.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod bench;
pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod run;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type SsflNet32 = model::SsflNet<f32>;
pub type SsflNet64 = model::SsflNet<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;

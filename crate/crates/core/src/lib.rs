pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{grad_check, Graph, Var};
pub use data::{Domain, VideoBatch, VideoSet};
pub use error::{Error, Result};
pub use model::{MetaTransModel, ModelConfig, StaticMode};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// 64-bit instantiations, the default for training and theorem checks.
pub type Tensor64 = Tensor<f64>;
pub type Graph64 = Graph<f64>;
pub type Model64 = MetaTransModel<f64>;

/// 32-bit instantiations.
pub type Tensor32 = Tensor<f32>;
pub type Graph32 = Graph<f32>;
pub type Model32 = MetaTransModel<f32>;

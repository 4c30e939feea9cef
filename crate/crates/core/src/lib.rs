//! Teacher-guided one-shot unstructured pruning.
//!
//! A compact student network is fine-tuned against a frozen teacher with a
//! normalized, temperature-scaled bidirectional KL loss; parameter importance
//! is accumulated from teacher-informed gradients with EMA smoothing and bias
//! correction; the network is pruned globally in one shot; and retraining
//! proceeds under the frozen sparsity mask, with or without distillation.
//!
//! All numeric code is generic over the scalar type: `f32` for training runs,
//! `f64` for gradient checking. Concrete aliases are exported below.

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
mod fileio;
pub mod gradcheck;
pub mod importance;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod pruning;
pub mod retrain;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = models::Model<f32>;
pub type Model64 = models::Model<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;

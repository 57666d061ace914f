//! Lesion-aware dynamic-kernel segmentation.
//!
//! A five-stage convolutional encoder/decoder whose segmentation head is a
//! kernel generated from the deepest encoder feature and refined at every
//! decoder stage from prediction-weighted lesion features. Pyramid-pooled
//! self-attention enhances skip features and a lesion-token cross-attention
//! enhances decoder features. Everything runs on a small `f64` reverse-mode
//! tape on the CPU.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod dynamic_kernel;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use config::{ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;

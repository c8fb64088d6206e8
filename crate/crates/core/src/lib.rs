//! Multimodal Mamba language model with pixel-wise alignment and
//! multi-scale feature fusion, built on a small reverse-mode autodiff
//! engine.

pub mod bench;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod mllm;
pub mod nn;
pub mod ssm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{DType, Scalar, Tensor};

//! Multi-head recurrent layer attention.
//!
//! * [`tensor`]: dense tensors, reverse-mode gradients, checkpoint I/O
//! * [`attention`]: direct, recurrent, light and kernel-normalized layer attention
//! * [`blocks`]: CNN / ViT attention blocks and analytic cost accounting
//! * [`model`]: desk-scale models, synthetic data and SGD training
//! * [`verify`]: oracle suites and diagnostic probes

pub mod attention;
pub mod blocks;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Tensor};

//! Pose-estimation building blocks implemented from scratch: a small NCHW
//! tensor substrate, convolutional layers with explicit backward passes,
//! multi-scale aggregation and attention bottleneck blocks, heatmap encode /
//! decode, OKS-AP and PCKh metrics, and the training / evaluation drivers
//! used by the CLI.

pub mod codec;
pub mod error;
pub mod fasm;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod reference;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Dtype, Rng, Scalar, Shape, Tensor};

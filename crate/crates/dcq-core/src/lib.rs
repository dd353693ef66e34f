//! Divide-and-conquer quantization lab: a small feed-forward engine, weight
//! quantizers, sectional distillation training, and numerical verification of
//! Lipschitz-chained quantization error bounds.

pub mod analysis;
pub mod bounds;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod network;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod section;
pub mod tensor;

pub use error::{DcqError, Result};
pub use layer::{Layer, LayerKind};
pub use network::Network;
pub use quant::QuantConfig;
pub use tensor::{Element, Tensor};

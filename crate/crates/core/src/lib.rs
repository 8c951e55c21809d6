//! Gate-based global filter pruning for small convolutional networks.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gates;
pub mod groups;
pub mod importance;
pub mod kernels;
pub mod model;
pub mod network;
pub mod optim;
pub mod pipeline;
pub mod pruner;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
pub use model::{LayerKind, LayerSpec, ModelSpec};
pub use network::{Mode, Network};
pub use tensor::Tensor;

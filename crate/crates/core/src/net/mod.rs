//! Minimal deterministic 1D-CNN engine.
//!
//! Hand-written reverse-mode gradients for conv, batch norm, ReLU, global
//! average pooling and the linear head; Adam; gated unit skipping with
//! channel adapters; parameter/FLOP accounting and binary checkpoints.

pub mod checkpoint;
pub mod cost;
pub mod layers;
mod network;
mod optim;
mod spec;
mod tensor;
mod train;

pub use cost::{count_params_flops, Cost};
pub use layers::{conv1d, softmax_cross_entropy, Padding};
pub use network::{Forward, Network, Tape};
pub use optim::Adam;
pub use spec::{AdapterSpec, Backbone, ConvUnitSpec, GatePlan, NetworkSpec, UnitKind};
pub use tensor::{ActivationMap, Tensor3};
pub use train::{EpochStats, TrainConfig, Trainer};

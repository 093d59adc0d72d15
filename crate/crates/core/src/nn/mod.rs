//! Convolutional networks with optional dynamic channel gating.

pub mod network;
pub mod ops;
pub mod optim;
pub mod spec;

pub use network::{Forward, GateSlot, LayerCost, Loss, Mode, Network, Tape};
pub use optim::{cosine_lr, sgd_step, sgd_step_tracked};
pub use spec::{Block, ConvSpec, LayerKind, LayerSpec, ModelSpec, ResidualSpec, Shape, PRESETS};

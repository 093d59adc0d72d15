//! Federated training with per-sample dynamic channel pruning.
//!
//! The crate is organised bottom-up: [`tensor`] holds arrays and named
//! parameter sets, [`nn`] compiles model specs into networks with a
//! hand-written backward pass, [`gate`] implements the channel gates,
//! [`fed`] runs the federated strategies, [`data`] builds and partitions
//! datasets, [`metrics`] does the accounting and [`experiment`] ties them
//! together behind a JSON config.

pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod gate;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Param, ParamSet, Precision, Tensor};

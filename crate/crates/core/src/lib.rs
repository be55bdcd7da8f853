//! FusionActNet: human activity recognition from inertial sensor windows with
//! two superclass experts (static and dynamic residual 1-D CNNs) whose class
//! probabilities are blended by a learned sigmoid guidance gate.
//!
//! The crate is self-contained: [`tensor`] provides the f64 autodiff engine,
//! [`nn`] the layers and blocks, [`model`] the fused network, [`data`] dataset
//! loading and windowing, [`train`] the two-stage training and metrics, and
//! [`checkpoint`] / [`config`] the on-disk formats used by the CLI.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};

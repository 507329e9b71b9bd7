//! Dual-branch hierarchical window-attention segmentation model with a
//! self-contained tape-based autodiff engine.
//!
//! The crate is organized bottom-up:
//! - [`tensor`], [`scalar`], [`rng`]: dense arrays, float-width abstraction,
//!   deterministic randomness;
//! - [`tape`]: reverse-mode autodiff over the full op set the model needs;
//! - [`params`], [`config`]: named parameter storage and run configuration;
//! - [`encoder`], [`attention`], [`decoder`], [`model`]: the network itself;
//! - [`losses`], [`metrics`], [`optim`], [`train`], [`checkpoint`]: the
//!   training and evaluation harness;
//! - [`pnm`], [`data`], [`synthetic`]: image I/O and datasets;
//! - [`gradcheck`]: finite-difference verification harness.

pub mod ablate;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pnm;
pub mod rng;
pub mod scalar;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{AblationState, ModelConfig, RunConfig};
pub use error::{Error, Result};
pub use params::{Forward, ParamStore};
pub use scalar::Scalar;
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;

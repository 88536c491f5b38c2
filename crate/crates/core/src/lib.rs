//! Volumetric multigrid convolutional network (3D MgNet) with a small
//! reverse-mode tensor engine, SGD training, subject-grouped stratified
//! cross-validation and binary classification metrics.

pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};

//! Structured random-matrix spectral-norm bounds and PAC-Bayes
//! generalization bounds for convolutional ReLU networks.

pub mod bound;
pub mod commands;
pub mod concentration;
pub mod config;
pub mod error;
pub mod fourier;
pub mod lab;
pub mod linalg;
pub mod report;
pub mod structured;
pub mod zoo;

pub use error::{Error, Result};

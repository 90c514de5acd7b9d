//! Hybrid RBF-SVM / LSTM-MLP classifier for Type 2 diabetes onset.

pub mod config;
pub mod data;
pub mod error;
pub mod kernel;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod rng;
pub mod svm;

pub use error::{Error, ErrorKind, Result};

/// Version string embedded in models and reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

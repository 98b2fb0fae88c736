//! Chronic-disease risk engine: survey cleaning, per-disease residual MLP
//! classifiers, Shapley-value attribution and a synthetic data generator.

pub mod checkpoint;
pub mod error;
pub mod explain;
pub mod ingest;
pub mod model;
pub mod schema;
pub mod server;
pub mod service;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

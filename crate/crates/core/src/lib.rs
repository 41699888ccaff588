//! Landslide susceptibility mapping with uphill-aligned features.

pub mod alignment;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod models;
pub mod nn;
pub mod raster;
pub mod render;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

//! Domain-generalizing segmentation with grouped stochastic quantization.

pub mod autodiff;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decorrelation;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prototypes;
pub mod quantizer;
pub mod reconstruction;
pub mod report;
pub mod splitter;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

//! Semantics-aware diffusion super-resolution at toy scale.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dape;
pub mod dataset;
pub mod degradation;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod tags;
pub mod teacher;
pub mod toydata;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use parallel::Execution;

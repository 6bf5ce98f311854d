//! Denoiser-driven anomaly detection: a noise-prediction network reconstructs
//! an image under guidance from the image itself, and the anomaly map compares
//! input and reconstruction in pixel and feature space.

pub mod checkpoint;
pub mod colormap;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod features;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod reconstruct;
pub mod schedule;
pub mod scoring;
pub mod synth;

pub use error::{DdadError, Result};
pub use image::ImageTensor;

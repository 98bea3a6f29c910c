//! Pneumothorax segmentation on chest radiographs.
//!
//! The crate covers the whole pipeline: dataset discovery and augmentation, a
//! U-Net with a pluggable five-stage encoder, combined BCE + Dice training with
//! a cosine learning-rate decay, threshold and connected-component
//! post-processing tuned by grid search, and pixel-level overlap metrics.

pub mod augment;
pub mod cli;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod postprocess;
pub mod trainer;
pub mod dataset;
pub mod error;
pub mod raster;

pub use error::{Error, Result};
pub use raster::{ImageTensor, MaskTensor, ProbMap};

//! Volumetric CT classification pipeline.
//!
//! End to end: synthetic thoracic phantom generation, deterministic
//! preprocessing (isotropic resampling, HU clipping, normalization, fixed-grid
//! pad/crop), rotation augmentation, mini 3D DenseNet/ResNet classifiers
//! trained from scratch on a built-in autodiff engine (focal loss, AdamW),
//! stratified evaluation with balanced accuracy, backbone transfer from a
//! calcium-burden pretext task, and 3D Grad-CAM heatmaps.

pub mod error;
pub mod exec;
pub mod augment;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod preprocess;
pub mod synth;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};

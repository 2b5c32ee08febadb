//! Two-stage capsule-network pipeline for three-class chest CT classification
//! (COVID-19 / CAP / normal) with clinical-data fusion, Grad-CAM heatmaps, and
//! a cross-validated evaluation harness.
//!
//! Everything runs on 64-bit reals over a small record-based reverse-mode
//! autodiff engine ([`tensor`]); checkpoints store values as little-endian
//! `f32`. All randomness flows from one root seed through named streams
//! ([`rng`]), so every artifact a run writes is byte-reproducible.

pub mod capsule;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Stain style transfer for histopathology patches.
//!
//! Learns a reference staining protocol with a GAN regularized by
//! structure-preserving similarity losses (SSIM and DSCSI) and normalizes
//! query patches to that style. Ships with a Beer-Lambert synthetic
//! histology generator so the whole pipeline is checkable at desk scale,
//! plus Reinhard- and Macenko-style classical baselines.

pub mod baselines;
pub mod color;
pub mod error;
pub mod metrics;
pub mod models;
pub mod report;
pub mod synth;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};

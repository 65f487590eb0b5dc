//! Region-targeted perceptual-loss single-image super-resolution.
//!
//! The crate covers the full pipeline: MATLAB-compatible bicubic
//! degradation, Object/Background/Boundary labeling from segmentation
//! maps, a frozen VGG-16-topology feature extractor, the region-masked
//! perceptual objective, SRGAN-style generator/discriminator networks,
//! a two-phase trainer, and PSNR/SSIM evaluation tooling. Everything is
//! f64 on the CPU and deterministic under pinned seeds.

extern crate blas_src;

pub mod cli;
pub mod container;
pub mod error;
pub mod features;
pub mod image;
pub mod nn;
pub mod metrics;
pub mod networks;
pub mod obb;
pub mod objectives;
pub mod synth;
pub mod trainer;
pub mod patch;
pub mod resize;

pub use error::{Error, Result};

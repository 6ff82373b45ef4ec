//! Altering-resolution semantic segmentation for compressed video.
//!
//! Keyframes (the I frame opening each GOP) run through a full-resolution
//! branch; the remaining frames run through the same architecture at a
//! reduced input scale. Cross-resolution fusion then warps the keyframe's
//! features with the codec's block motion vectors and aggregates them into
//! the upsampled low-resolution features with local attention, just before
//! the shared final 1×1 convolution.
//!
//! Module map:
//!
//! - [`tensor`], [`ops`], [`autograd`]: dense `f64` tensors, kernels and a
//!   reverse-mode tape with finite-difference checking.
//! - [`codec`]: a block-matching toy codec that supplies GOPs, motion
//!   vectors and residuals.
//! - [`backbone`]: the split segmentation network and its cost model.
//! - [`creff`]: motion-vector warping and attention-based fusion.
//! - [`train`]: HR training and feature-similarity training of the LR path.
//! - [`eval`]: GOP scheduling, sequence inference, mIoU, amortized cost and
//!   Bjøntegaard-style curve deltas.
//! - [`synth`]: the moving-shapes toy dataset.

pub mod autograd;
pub mod backbone;
mod bytes;
pub mod codec;
pub mod cost;
pub mod creff;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod ops;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{LabelMap, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u32 = 255;

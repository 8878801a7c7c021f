//! Cascaded sight-distance depth optimization.
//!
//! A directly optimized per-pixel inverse-depth field is fitted to a short
//! image sequence by minimizing a photometric view-synthesis objective
//! (SSIM + L1, edge-aware smoothness, auto-masking). A rough depth map then
//! splits the image into depth intervals, each interval is re-optimized
//! against source frames further apart in time so that distant structure
//! still shows usable parallax, and the per-interval maps are fused.
//!
//! Module map:
//! - [`geometry`]: pinhole camera, SE(3) poses, inverse-depth mapping, warping.
//! - [`imaging`]: image grids, bilinear sampling, view synthesis, local statistics.
//! - [`photometric`]: SSIM, photometric error, auto-mask, smoothness, total loss.
//! - [`optimization`]: reverse-mode gradients, finite-difference checks, Adam.
//! - [`cascade`]: sight masks, frame-offset planning, fusion, pipeline driver.
//! - [`synthscene`]: ray-cast synthetic scenes with exact ground truth.
//! - [`evaluation`]: depth metrics with median scaling and depth cap.
//! - [`dataio`]: PFM, 16-bit PNG depth, split files, intrinsics convention.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cascade;
pub mod dataio;
mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod imaging;
pub mod optimization;
pub mod photometric;
pub mod synthscene;

pub use error::{Error, Result};

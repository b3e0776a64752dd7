//! Nighttime RAW-to-RGB rendering.
//!
//! - [`imaging`]: classical ISP stages (demosaic, denoise, white balance, CCM, tone, sRGB).
//! - [`nn`]: a small reverse-mode autodiff engine with the layers and losses the
//!   network needs.
//! - [`cbunet`]: the two-stage network (illuminant estimation, then
//!   histogram-aware brightness prediction) and the full render path.
//! - [`train`]: datasets, the staged training schedule, metrics and ablations.

pub mod cbunet;
pub mod error;
pub mod imaging;
pub mod nn;
pub mod train;

pub use error::{Error, Result};

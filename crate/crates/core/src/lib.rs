//! Spectral-enhanced rectangle transformer for hyperspectral image denoising.

pub mod degradation;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rect_attention;
pub mod rng;
pub mod spectral_enhance;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

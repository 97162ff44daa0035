//! Content-adaptive image tokenization.
//!
//! Images (or their text descriptions) are scored for complexity, scores are
//! mapped to one of three compression ratios through calibrated thresholds,
//! and a single nested VAE encodes each image at its assigned ratio.

pub mod backend;
mod bytes;
pub mod calibration;
pub mod complexity;
pub mod error;
pub mod imageio;
pub mod latentio;
pub mod losses;
pub mod nestedvae;
pub mod trainer;

pub use error::{Error, Result};

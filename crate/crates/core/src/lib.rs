//! Predictive-filtering image deraining.
//!
//! A small UNet predicts a 3×3 kernel for every pixel and color channel; the
//! rainy image is filtered with those kernels, optionally at several
//! dilations sharing the same weights, and optionally refined by a second
//! network that also sees the per-pixel kernel mean of the first. RainMix
//! augmentation and a two-stage trainer complete the pipeline.

pub mod bench;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod net;
pub mod params;
pub mod pfilt;
pub mod rainmix;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

//! Neural relief shading for digital elevation models.
//!
//! A U-Net maps normalized elevation tiles to grayscale shading; large
//! rasters are rendered by overlapping tiles with linear blending. An
//! analytical diffuse shader and image metrics are included for comparison.

pub mod baseline;
pub mod error;
pub mod exec;
pub mod inference;
pub mod metrics;
pub mod raster_io;
pub mod rng;
pub mod tensor;
pub mod terrain;
pub mod training;
pub mod unet;

pub use error::{ReliefError, Result};

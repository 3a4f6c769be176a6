//! Core of the inpainting toolkit: raster types, synthetic scene and
//! benchmark generation, training mask policies, the simulated judge,
//! alignment metrics and metric/judgment agreement analytics.

pub mod agreement;
pub mod embed;
pub mod error;
pub mod glyphs;
pub mod io;
pub mod judge;
pub mod maskpolicy;
pub mod metrics;
pub mod par;
pub mod raster;
pub mod rng;
pub mod scenegen;
pub mod vocab;

pub use error::{Error, Result};
pub use par::Exec;
pub use raster::{composite, mask_area_ratio, size_bucket, BoundingBox, ImageBuffer, MaskBuffer, SizeBucket};
pub use rng::RngStream;

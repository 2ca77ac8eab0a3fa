//! Discovery of surface mines and tailings dams in 12-band Sentinel-2 mosaics.
//!
//! The crate covers the offline pipeline end to end: cloud-masked median
//! compositing of scene stacks, patch extraction around labeled coordinates,
//! training of the fully convolutional discovery network and the impact
//! classifier, tiled wide-area inference, clustering and export of
//! geo-referenced detections. A procedural scene generator provides exact
//! ground truth for testing all of it without real imagery.

pub mod compositing;
pub mod dataset;
pub mod error;
pub mod models;
pub mod nn;
pub mod raster;
pub mod synthetic;
pub mod training;
pub mod widearea;

pub use error::{Error, Result};

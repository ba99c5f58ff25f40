//! Tiled, multi-scale object detection over arbitrarily large overhead rasters.
//!
//! The pipeline is: [`tiler`] cuts a raster into overlapping named chips,
//! [`ensemble`] runs each chip through a [`ensemble::DetectorBackend`] at one or
//! more ground scales, [`stitcher`] moves the chip detections back into the
//! parent image frame and merges them with non-maximal suppression, and
//! [`eval`] scores the result. [`network`] holds a from-scratch forward pass of
//! the 22-layer detection network; [`imaging`] and [`dataprep`] cover raster
//! I/O, resolution degradation and label preparation.

pub mod dataprep;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod network;
pub mod par;
pub mod stitcher;
pub mod tiler;

pub use error::{Error, Result};
pub use geometry::{Detection, GeoBox, GeoTransform, PixelBox};
pub use imaging::{ImageMeta, Raster};
pub use tiler::{TilePlan, TileSpec};

/// Default class vocabulary; `class_id` indexes into this list.
pub const DEFAULT_CLASSES: [&str; 5] = ["car", "building", "airplane", "boat", "airport"];

/// Name for `class_id`, or `class_<id>` when it is outside the default list.
pub fn class_name(class_id: u32) -> String {
    DEFAULT_CLASSES
        .get(class_id as usize)
        .map(|s| (*s).to_string())
        .unwrap_or_else(|| format!("class_{class_id}"))
}

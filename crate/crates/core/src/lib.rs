//! Whole-slide image reconstruction from manually swept microscope video.
//!
//! The pipeline turns a directory of decoded video frames into a stitched
//! mosaic: pause frames are picked out by block-matching motion, de-duplicated,
//! and stitched recursively in batches. The mosaic can then be co-registered
//! against a reference scan, scored with SSIM/PSNR, and written as a tile
//! pyramid.

pub mod coregister;
pub mod error;
pub mod frame_extract;
pub mod imagecore;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod registration;
pub mod stitcher;
pub mod synthgen;
pub mod wsi_output;

pub use error::{Error, Result};

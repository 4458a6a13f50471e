//! Raster types, planar transforms, resampling and sharpness.

mod buffer;
mod focus;
mod transform;
mod warp;

pub use buffer::{luma, ImageBuffer, Mask, Rect, BACKGROUND};
pub use focus::{focus_score, FocusScore};
pub use transform::{Transform2D, TransformModel, SINGULAR_EPS};
pub use warp::{
    downscale, downscale_mask, gaussian_blur, sample_bilinear, upscale, warp, warped_bounds,
    Interp, Warped,
};

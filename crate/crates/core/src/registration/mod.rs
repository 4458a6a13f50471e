//! Pairwise geometric registration: corners, binary descriptors, matching and
//! robust model fitting.

mod brief;
mod estimate;
mod fast;
mod matching;

use serde::{Deserialize, Serialize};

pub use brief::{describe, smooth_for_descriptors};
pub use estimate::{fit_model, ransac, Point, RansacParams, RobustFit};
pub use fast::{detect, detect_with, DetectorParams, MIN_DIMENSION, PATCH_RADIUS};
pub use matching::{match_descriptors, Match, MatchSet, DEFAULT_RATIO};

use crate::error::{Error, Result};
use crate::imagecore::{ImageBuffer, Mask, Transform2D, TransformModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub response: f32,
    /// Radians.
    pub orientation: f64,
}

/// 256-bit binary descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Descriptor {
    pub bits: [u64; 4],
}

impl Descriptor {
    #[inline]
    pub fn distance(&self, other: &Descriptor) -> u32 {
        (self.bits[0] ^ other.bits[0]).count_ones()
            + (self.bits[1] ^ other.bits[1]).count_ones()
            + (self.bits[2] ^ other.bits[2]).count_ones()
            + (self.bits[3] ^ other.bits[3]).count_ones()
    }
}

/// Keypoints with their descriptors, index-aligned. Coordinates may be scaled
/// into a different frame than the image they were detected in.
#[derive(Clone, Debug, Default)]
pub struct Features {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    /// Detects and describes `img`. Keypoint coordinates are multiplied by
    /// `coord_scale` afterwards (use it when `img` is a downscaled copy).
    pub fn extract(
        img: &ImageBuffer,
        mask: Option<&Mask>,
        params: &DetectorParams,
        max_keypoints: usize,
        coord_scale: f64,
    ) -> Result<Features> {
        let gray = img.to_gray();
        let mut keypoints = detect_with(&gray, mask, params, max_keypoints)?;
        let descriptors = describe(&smooth_for_descriptors(&gray), &keypoints);
        if coord_scale != 1.0 {
            for k in &mut keypoints {
                k.x *= coord_scale;
                k.y *= coord_scale;
            }
        }
        Ok(Features {
            keypoints,
            descriptors,
        })
    }

    pub fn push(&mut self, kp: Keypoint, d: Descriptor) {
        self.keypoints.push(kp);
        self.descriptors.push(d);
    }
}

/// Transform mapping B's coordinates into A's frame, with fit statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: Transform2D,
    pub inliers: usize,
    pub total_matches: usize,
    pub rms_error: f64,
    pub confidence: f64,
}

/// Robustly fits `model` to `matches`, mapping B keypoints onto A keypoints.
pub fn estimate_transform(
    matches: &MatchSet,
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    model: TransformModel,
    params: &RansacParams,
) -> Result<RegistrationResult> {
    let src: Vec<Point> = matches
        .pairs
        .iter()
        .map(|m| (kps_b[m.b].x, kps_b[m.b].y))
        .collect();
    let dst: Vec<Point> = matches
        .pairs
        .iter()
        .map(|m| (kps_a[m.a].x, kps_a[m.a].y))
        .collect();
    let fit = ransac(model, &src, &dst, params)?;
    let total = matches.len();
    Ok(RegistrationResult {
        transform: fit.transform,
        inliers: fit.inliers.len(),
        total_matches: total,
        rms_error: fit.rms_error,
        confidence: if total > 0 {
            fit.inliers.len() as f64 / total as f64
        } else {
            0.0
        },
    })
}

/// Matches and fits in one step: B into A.
pub fn register(
    a: &Features,
    b: &Features,
    model: TransformModel,
    ratio: f64,
    params: &RansacParams,
) -> Result<RegistrationResult> {
    let matches = match_descriptors(&a.descriptors, &b.descriptors, ratio);
    if matches.len() < model.min_samples() {
        return Err(Error::InsufficientMatches {
            got: matches.len(),
            needed: model.min_samples(),
        });
    }
    estimate_transform(&matches, &a.keypoints, &b.keypoints, model, params)
}

/// Registers two images directly with default detector settings.
pub fn register_images(
    a: &ImageBuffer,
    b: &ImageBuffer,
    model: TransformModel,
    max_keypoints: usize,
    params: &RansacParams,
) -> Result<RegistrationResult> {
    let det = DetectorParams::default();
    let fa = Features::extract(a, None, &det, max_keypoints, 1.0)?;
    let fb = Features::extract(b, None, &det, max_keypoints, 1.0)?;
    register(&fa, &fb, model, DEFAULT_RATIO, params)
}

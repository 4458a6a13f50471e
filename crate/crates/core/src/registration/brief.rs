//! Steered binary descriptors: 256 intensity comparisons on a smoothed patch,
//! rotated by the keypoint orientation.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::imagecore::{gaussian_blur, ImageBuffer};

use super::{Descriptor, Keypoint};

const PATTERN_SEED: u64 = 0x5eed_b41e_f00d;
/// Sample offsets stay inside this radius so any rotation fits the patch.
const PATTERN_RADIUS: f64 = 13.0;
const SMOOTHING_SIGMA: f64 = 2.0;

type Pattern = [((f64, f64), (f64, f64)); 256];

fn pattern() -> &'static Pattern {
    static PATTERN: OnceLock<Pattern> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PATTERN_SEED);
        let normal: Normal<f64> = Normal::new(0.0, 31.0 / 5.0).expect("positive sigma");
        let draw = |rng: &mut ChaCha8Rng| loop {
            let p: (f64, f64) = (normal.sample(rng).round(), normal.sample(rng).round());
            if p.0 * p.0 + p.1 * p.1 <= PATTERN_RADIUS * PATTERN_RADIUS {
                return p;
            }
        };
        let mut out = [((0.0, 0.0), (0.0, 0.0)); 256];
        for slot in out.iter_mut() {
            loop {
                let a = draw(&mut rng);
                let b = draw(&mut rng);
                if a != b {
                    *slot = (a, b);
                    break;
                }
            }
        }
        out
    })
}

/// Smoothed luma used for descriptor sampling.
pub fn smooth_for_descriptors(gray: &ImageBuffer) -> ImageBuffer {
    gaussian_blur(&gray.to_gray(), SMOOTHING_SIGMA)
}

/// Orientations are quantized to this many bins before steering.
const ANGLE_BINS: usize = 32;

/// Pattern points rotated to each angle bin and rounded, `[p0, q0, p1, q1, ...]`.
fn steered() -> &'static [[(i32, i32); 512]] {
    static STEERED: OnceLock<Vec<[(i32, i32); 512]>> = OnceLock::new();
    STEERED.get_or_init(|| {
        let pat = pattern();
        (0..ANGLE_BINS)
            .map(|bin| {
                let (sin, cos) = (bin as f64 * std::f64::consts::TAU / ANGLE_BINS as f64).sin_cos();
                let rot = |p: (f64, f64)| ((p.0 * cos - p.1 * sin).round() as i32, (p.0 * sin + p.1 * cos).round() as i32);
                let mut out = [(0, 0); 512];
                for (i, &(p, q)) in pat.iter().enumerate() {
                    out[2 * i] = rot(p);
                    out[2 * i + 1] = rot(q);
                }
                out
            })
            .collect()
    })
}

fn angle_bin(theta: f64) -> usize {
    ((theta / std::f64::consts::TAU * ANGLE_BINS as f64).round() as i64).rem_euclid(ANGLE_BINS as i64) as usize
}

/// Computes one descriptor per keypoint. `smoothed` must come from
/// [`smooth_for_descriptors`]; samples falling outside the image are clamped.
pub fn describe(smoothed: &ImageBuffer, keypoints: &[Keypoint]) -> Vec<Descriptor> {
    let steered = steered();
    let (w, h) = (smoothed.width() as i64, smoothed.height() as i64);
    let d = smoothed.data();
    let reach = PATTERN_RADIUS.ceil() as i64 + 1;
    crate::par::map(keypoints, |kp| {
        let offs = &steered[angle_bin(kp.orientation)];
        let (x, y) = (kp.x.round() as i64, kp.y.round() as i64);
        let inside = x >= reach && y >= reach && x + reach < w && y + reach < h;
        let at = |(dx, dy): (i32, i32)| -> u8 {
            if inside {
                d[((y + dy as i64) * w + x + dx as i64) as usize]
            } else {
                let xx = (x + dx as i64).clamp(0, w - 1);
                let yy = (y + dy as i64).clamp(0, h - 1);
                d[(yy * w + xx) as usize]
            }
        };
        let mut bits = [0u64; 4];
        for i in 0..256 {
            if at(offs[2 * i]) < at(offs[2 * i + 1]) {
                bits[i / 64] |= 1 << (i % 64);
            }
        }
        Descriptor { bits }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_fits_patch() {
        for ((ax, ay), (bx, by)) in pattern() {
            assert!((ax * ax + ay * ay).sqrt() <= PATTERN_RADIUS);
            assert!((bx * bx + by * by).sqrt() <= PATTERN_RADIUS);
        }
    }

    #[test]
    fn rotated_patch_gives_close_descriptor() {
        // radial texture rotated by 90 degrees about the keypoint
        let f = |x: f64, y: f64| ((x * 0.7).sin() * 60.0 + (y * 0.45 + x * 0.2).cos() * 60.0 + 128.0) as u8;
        let a = ImageBuffer::from_gray_fn(64, 64, |x, y| f(x as f64 - 32.0, y as f64 - 32.0));
        let b = ImageBuffer::from_gray_fn(64, 64, |x, y| f(y as f64 - 32.0, -(x as f64 - 32.0)));
        let sa = smooth_for_descriptors(&a);
        let sb = smooth_for_descriptors(&b);
        let ka = Keypoint {
            x: 32.0,
            y: 32.0,
            response: 1.0,
            orientation: super::super::fast::orientation(sa.data(), 64, 32, 32),
        };
        let kb = Keypoint {
            orientation: super::super::fast::orientation(sb.data(), 64, 32, 32),
            ..ka
        };
        let da = describe(&sa, &[ka])[0];
        let db = describe(&sb, &[kb])[0];
        let unsteered = describe(&sb, &[Keypoint { orientation: ka.orientation, ..ka }])[0];
        assert!(da.distance(&db) < unsteered.distance(&da));
        assert!(da.distance(&db) < 64);
    }
}

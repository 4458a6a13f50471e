use serde::{Deserialize, Serialize};

use super::buffer::ImageBuffer;
use crate::error::{Error, Result};

/// Variance of the 4-neighbour Laplacian over interior pixels.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FocusScore(pub f64);

/// Sharpness of `img` (converted to luma first when RGB).
pub fn focus_score(img: &ImageBuffer) -> Result<FocusScore> {
    let (w, h) = img.dims();
    if w < 3 || h < 3 {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            min: 3,
        });
    }
    let gray = img.to_gray();
    let d = gray.data();
    let w = w as usize;
    let h = h as usize;
    let n = ((w - 2) * (h - 2)) as f64;
    // integer responses keep the sums exact
    let mut sum: i64 = 0;
    let mut sum_sq: i128 = 0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = d[y * w + x] as i64;
            let r = d[(y - 1) * w + x] as i64
                + d[(y + 1) * w + x] as i64
                + d[y * w + x - 1] as i64
                + d[y * w + x + 1] as i64
                - 4 * c;
            sum += r;
            sum_sq += (r * r) as i128;
        }
    }
    let mean = sum as f64 / n;
    let var = (sum_sq as f64 / n - mean * mean).max(0.0);
    Ok(FocusScore(var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::warp::gaussian_blur;

    #[test]
    fn flat_image_scores_zero() {
        let img = ImageBuffer::filled(20, 20, 1, 77);
        assert_eq!(focus_score(&img).unwrap().0, 0.0);
    }

    #[test]
    fn impulse_matches_enumeration() {
        let img = ImageBuffer::from_gray_fn(5, 5, |x, y| if x == 2 && y == 2 { 255 } else { 0 });
        // enumerate the nine interior responses directly
        let p = |x: i32, y: i32| -> f64 {
            if (0..5).contains(&x) && (0..5).contains(&y) {
                img.get(x as u32, y as u32, 0) as f64
            } else {
                0.0
            }
        };
        let mut responses = Vec::new();
        for y in 1..4 {
            for x in 1..4 {
                responses.push(p(x, y - 1) + p(x, y + 1) + p(x - 1, y) + p(x + 1, y) - 4.0 * p(x, y));
            }
        }
        let mean = responses.iter().sum::<f64>() / 9.0;
        let var = responses.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 9.0;
        assert_eq!(var, 144_500.0);
        assert!((focus_score(&img).unwrap().0 - var).abs() < 1e-9);
    }

    #[test]
    fn blur_lowers_score() {
        let sharp = ImageBuffer::from_gray_fn(64, 64, |x, y| if (x / 4 + y / 4) % 2 == 0 { 30 } else { 220 });
        let blurred = {
            // 5x5 box blur
            ImageBuffer::from_gray_fn(64, 64, |x, y| {
                let mut s = 0u32;
                let mut n = 0u32;
                for dy in -2i32..=2 {
                    for dx in -2i32..=2 {
                        let (xx, yy) = (x as i32 + dx, y as i32 + dy);
                        if (0..64).contains(&xx) && (0..64).contains(&yy) {
                            s += sharp.get(xx as u32, yy as u32, 0) as u32;
                            n += 1;
                        }
                    }
                }
                ((s + n / 2) / n) as u8
            })
        };
        assert!(focus_score(&sharp).unwrap() > focus_score(&blurred).unwrap());
        assert!(focus_score(&sharp).unwrap() > focus_score(&gaussian_blur(&sharp, 1.5)).unwrap());
    }

    #[test]
    fn constant_offset_invariant() {
        let img = ImageBuffer::from_gray_fn(40, 30, |x, y| (40 + (x * 7 + y * 3) % 150) as u8);
        let a = focus_score(&img).unwrap().0;
        let b = focus_score(&img.offset(20)).unwrap().0;
        assert!((a - b).abs() <= f64::EPSILON * a.abs().max(1.0));
    }

    #[test]
    fn too_small() {
        assert!(matches!(
            focus_score(&ImageBuffer::filled(2, 10, 1, 0)),
            Err(Error::ImageTooSmall { .. })
        ));
    }
}

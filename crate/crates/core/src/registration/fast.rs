//! Segment-test corner detection with grid-bucketed retention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{ImageBuffer, Mask};

use super::Keypoint;

/// Bresenham circle of radius 3, clockwise from 12 o'clock.
pub(crate) const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// Radius of the patch used for orientation and descriptors.
pub const PATCH_RADIUS: i32 = 15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    /// Intensity difference a circle pixel needs over the center.
    pub threshold: u8,
    /// Contiguous arc length required on the 16-pixel circle.
    pub arc_length: usize,
    /// Keypoints closer than this to the image border are discarded.
    pub border: u32,
    /// Side of the square retention cells.
    pub cell_size: u32,
    /// Strongest keypoints kept per cell.
    pub per_cell: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            threshold: 20,
            arc_length: 9,
            border: PATCH_RADIUS as u32 + 2,
            cell_size: 64,
            per_cell: 12,
        }
    }
}

pub const MIN_DIMENSION: u32 = 32;

#[inline]
fn corner_response(d: &[u8], idx: usize, offsets: &[isize; 16], t: i32, arc: usize) -> Option<f32> {
    let c = d[idx] as i32;
    let at = |k: usize| d[(idx as isize + offsets[k]) as usize] as i32 - c;
    if arc >= 9 {
        // any run of 9 covers pixel 0 or 8, and at least two compass points
        let (d0, d8) = (at(0), at(8));
        if d0.abs() <= t && d8.abs() <= t {
            return None;
        }
        let compass = [d0, at(4), d8, at(12)];
        let brighter = compass.iter().filter(|&&v| v > t).count();
        let darker = compass.iter().filter(|&&v| v < -t).count();
        if brighter < 2 && darker < 2 {
            return None;
        }
    }
    let mut diffs = [0i32; 16];
    let mut bright = 0u32;
    let mut dark = 0u32;
    for (k, slot) in diffs.iter_mut().enumerate() {
        *slot = at(k);
        bright |= ((*slot > t) as u32) << k;
        dark |= ((*slot < -t) as u32) << k;
    }
    let is_bright = has_arc(bright, arc);
    let is_dark = has_arc(dark, arc);
    if !is_bright && !is_dark {
        return None;
    }
    let bright_sum: i32 = diffs.iter().filter(|&&v| v > t).map(|v| v - t).sum();
    let dark_sum: i32 = diffs.iter().filter(|&&v| v < -t).map(|v| -v - t).sum();
    let score = match (is_bright, is_dark) {
        (true, true) => bright_sum.max(dark_sum),
        (true, false) => bright_sum,
        _ => dark_sum,
    };
    Some(score as f32)
}

/// True when the circular 16-bit set `bits` holds a run of at least `arc` ones.
#[inline]
fn has_arc(bits: u32, arc: usize) -> bool {
    if arc == 0 {
        return true;
    }
    if arc > 16 {
        return false;
    }
    let doubled = bits | (bits << 16);
    let mut run = doubled;
    for i in 1..arc {
        run &= doubled >> i;
    }
    run != 0
}

/// Intensity-centroid orientation over a disc of radius [`PATCH_RADIUS`].
pub(crate) fn orientation(d: &[u8], w: usize, x: usize, y: usize) -> f64 {
    let r = PATCH_RADIUS;
    let mut m10 = 0i64;
    let mut m01 = 0i64;
    for dy in -r..=r {
        let span = ((r * r - dy * dy) as f64).sqrt() as usize;
        let start = (y as i32 + dy) as usize * w + x - span;
        let mut row_sum = 0i64;
        for (k, &v) in d[start..=start + 2 * span].iter().enumerate() {
            m10 += (k as i64 - span as i64) * v as i64;
            row_sum += v as i64;
        }
        m01 += dy as i64 * row_sum;
    }
    (m01 as f64).atan2(m10 as f64)
}

/// Detects up to `max_keypoints` corners in `gray`, skipping any whose patch
/// touches an invalid pixel of `mask`.
pub fn detect_with(
    gray: &ImageBuffer,
    mask: Option<&Mask>,
    params: &DetectorParams,
    max_keypoints: usize,
) -> Result<Vec<Keypoint>> {
    let (w, h) = gray.dims();
    if w < MIN_DIMENSION || h < MIN_DIMENSION {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            min: MIN_DIMENSION,
        });
    }
    let gray = gray.to_gray();
    let d = gray.data();
    let (wu, hu) = (w as usize, h as usize);
    let border = params.border.max(3) as usize;
    if wu <= 2 * border || hu <= 2 * border {
        return Ok(Vec::new());
    }
    let patch_ok = mask.map(|m| m.erode(PATCH_RADIUS as u32 + 1));
    let t = params.threshold as i32;
    let offsets: [isize; 16] = std::array::from_fn(|k| CIRCLE[k].1 as isize * wu as isize + CIRCLE[k].0 as isize);

    // responses over the band where the circle fits, zero elsewhere
    let scores: Vec<Vec<f32>> = crate::par::map_range(hu, |y| {
        let mut row = vec![0f32; wu];
        if y < 3 || y + 3 >= hu {
            return row;
        }
        // branch-free compass pre-test over the whole row
        let up = &d[(y - 3) * wu..(y - 2) * wu];
        let mid = &d[y * wu..(y + 1) * wu];
        let down = &d[(y + 3) * wu..(y + 4) * wu];
        let n = wu - 6;
        let mut pass = vec![false; n];
        for (k, p) in pass.iter_mut().enumerate() {
            let x = k + 3;
            let c = mid[x] as i16;
            let (hi, lo) = (c + t as i16, c - t as i16);
            let ring = [up[x] as i16, mid[x + 3] as i16, down[x] as i16, mid[x - 3] as i16];
            let bright: u8 = ring.iter().map(|&v| (v > hi) as u8).sum();
            let dark: u8 = ring.iter().map(|&v| (v < lo) as u8).sum();
            *p = bright >= 2 || dark >= 2;
        }
        let pre = params.arc_length >= 9;
        for (k, &p) in pass.iter().enumerate() {
            if pre && !p {
                continue;
            }
            let x = k + 3;
            if let Some(s) = corner_response(d, y * wu + x, &offsets, t, params.arc_length) {
                row[x] = s;
            }
        }
        row
    });

    let mut candidates = Vec::new();
    for y in border..hu - border {
        for x in border..wu - border {
            let s = scores[y][x];
            if s <= 0.0 {
                continue;
            }
            if let Some(m) = &patch_ok {
                if !m.get(x as u32, y as u32) {
                    continue;
                }
            }
            // non-strict 3x3 maximum: plateaus keep every tied pixel
            let is_max = !scores[y - 1..=y + 1]
                .iter()
                .any(|row| row[x - 1..=x + 1].iter().any(|&v| v > s));
            if is_max {
                candidates.push((x, y, s));
            }
        }
    }

    let cell = params.cell_size.max(1) as usize;
    let cells_x = wu.div_ceil(cell);
    let mut buckets: Vec<Vec<(usize, usize, f32)>> = vec![Vec::new(); cells_x * hu.div_ceil(cell)];
    for c in candidates {
        buckets[(c.1 / cell) * cells_x + c.0 / cell].push(c);
    }
    let mut kept = Vec::new();
    for mut b in buckets {
        b.sort_by(|p, q| q.2.total_cmp(&p.2).then(p.1.cmp(&q.1)).then(p.0.cmp(&q.0)));
        b.truncate(params.per_cell);
        kept.extend(b);
    }
    kept.sort_by(|p, q| q.2.total_cmp(&p.2).then(p.1.cmp(&q.1)).then(p.0.cmp(&q.0)));
    kept.truncate(max_keypoints);

    Ok(kept
        .into_iter()
        .map(|(x, y, s)| Keypoint {
            x: x as f64,
            y: y as f64,
            response: s,
            orientation: orientation(d, wu, x, y),
        })
        .collect())
}

/// [`detect_with`] using default detector parameters and no mask.
pub fn detect(img: &ImageBuffer, max_keypoints: usize) -> Result<Vec<Keypoint>> {
    detect_with(&img.to_gray(), None, &DetectorParams::default(), max_keypoints)
}

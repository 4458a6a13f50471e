//! Ground-truth fixture generator.
//!
//! Renders a procedural "virtual slide" (multi-scale noise stroma with
//! scattered nuclei) and simulates a serpentine manual sweep over it: the
//! operator pauses at each stop, travels to the next, and occasionally comes
//! back to a stop already visited. Every emitted frame carries its exact
//! frame-to-slide transform.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{gaussian_blur, sample_bilinear, ImageBuffer, Transform2D};
use crate::par;

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub slide_width: u32,
    pub slide_height: u32,
    pub frame_width: u32,
    pub frame_height: u32,
    /// Fractional overlap between adjacent stops, in [0.2, 0.3].
    pub overlap_fraction: f64,
    /// Unvisited border around the swept area.
    pub margin: u32,
    /// Truncates the serpentine after this many stops.
    pub max_stops: Option<usize>,
    pub pause_frames: usize,
    pub travel_frames: usize,
    /// Per-stop multiplicative brightness drawn from `1 ± brightness_jitter`.
    pub brightness_jitter: f64,
    /// Fraction of frames blurred with `blur_sigma`.
    pub blur_fraction: f64,
    pub blur_sigma: f64,
    pub rotation_jitter_deg: f64,
    /// Per-stop uniform positional jitter in pixels.
    pub position_jitter: f64,
    /// Stops (by serpentine index) that the operator leaves and returns to.
    pub revisits: Vec<usize>,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            slide_width: 4000,
            slide_height: 3000,
            frame_width: 640,
            frame_height: 480,
            overlap_fraction: 0.3,
            margin: 32,
            max_stops: None,
            pause_frames: 20,
            travel_frames: 8,
            brightness_jitter: 0.0,
            blur_fraction: 0.0,
            blur_sigma: 1.5,
            rotation_jitter_deg: 0.0,
            position_jitter: 0.0,
            revisits: Vec::new(),
            seed: 7,
        }
    }
}

impl SweepSpec {
    /// Parses a TOML spec; absent fields take their defaults, unknown keys fail.
    pub fn from_toml(text: &str) -> Result<SweepSpec> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Pixel step between neighbouring stops along x and y.
    pub fn step(&self) -> (u32, u32) {
        (
            (self.frame_width as f64 * (1.0 - self.overlap_fraction)).round() as u32,
            (self.frame_height as f64 * (1.0 - self.overlap_fraction)).round() as u32,
        )
    }

    /// Columns and rows of the stop grid.
    pub fn grid(&self) -> Result<(usize, usize)> {
        if !(0.2..=0.3).contains(&self.overlap_fraction) {
            return Err(Error::SpecInfeasible(format!(
                "overlap {} outside [0.2, 0.3]",
                self.overlap_fraction
            )));
        }
        let usable_w = self.slide_width as i64 - 2 * self.margin as i64 - self.frame_width as i64;
        let usable_h = self.slide_height as i64 - 2 * self.margin as i64 - self.frame_height as i64;
        if usable_w < 0 || usable_h < 0 {
            return Err(Error::SpecInfeasible(format!(
                "frame {}x{} does not fit slide {}x{} with margin {}",
                self.frame_width, self.frame_height, self.slide_width, self.slide_height, self.margin
            )));
        }
        let (sx, sy) = self.step();
        Ok((
            (usable_w / sx as i64) as usize + 1,
            (usable_h / sy as i64) as usize + 1,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopTruth {
    pub stop: usize,
    pub col: usize,
    pub row: usize,
    /// Frame-to-slide transform while paused here.
    pub transform: Transform2D,
    pub brightness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub index: usize,
    pub file: String,
    pub transform: Transform2D,
    /// Stop index when this frame belongs to a pause.
    pub stop: Option<usize>,
    pub brightness: f64,
    pub blur_sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PauseInterval {
    pub start: usize,
    pub end: usize,
    pub stop: usize,
    /// True for the second visit of a revisited stop.
    pub revisit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SweepSpec,
    pub stops: Vec<StopTruth>,
    pub pauses: Vec<PauseInterval>,
    pub frames: Vec<FrameTruth>,
}

impl GroundTruth {
    pub fn load(path: impl AsRef<Path>) -> Result<GroundTruth> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

// --- procedural texture -------------------------------------------------

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn lattice(ix: i64, iy: i64, salt: u64) -> f64 {
    let h = mix64(mix64(ix as u64 ^ salt.rotate_left(17)) ^ (iy as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated value noise in [0, 1] with lattice spacing `scale`.
fn value_noise(x: f64, y: f64, scale: f64, salt: u64) -> f64 {
    let fx = x / scale;
    let fy = y / scale;
    let ix = fx.floor();
    let iy = fy.floor();
    let tx = fx - ix;
    let ty = fy - iy;
    let sx = tx * tx * (3.0 - 2.0 * tx);
    let sy = ty * ty * (3.0 - 2.0 * ty);
    let (ix, iy) = (ix as i64, iy as i64);
    let a = lattice(ix, iy, salt);
    let b = lattice(ix + 1, iy, salt);
    let c = lattice(ix, iy + 1, salt);
    let d = lattice(ix + 1, iy + 1, salt);
    let top = a + (b - a) * sx;
    let bot = c + (d - c) * sx;
    top + (bot - top) * sy
}

/// Renders the virtual slide.
pub fn render_slide(width: u32, height: u32, seed: u64) -> ImageBuffer {
    let salt = mix64(seed);
    let w = width as usize;
    let mut data = vec![0u8; w * height as usize * 3];
    par::for_each_chunk_mut(&mut data, w * 3, |y, row| {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let density = value_noise(xf, yf, 420.0, salt ^ 1);
            let stroma = 0.55 * value_noise(xf, yf, 23.0, salt ^ 2)
                + 0.30 * value_noise(xf, yf, 9.0, salt ^ 3)
                + 0.15 * value_noise(xf, yf, 4.0, salt ^ 4);
            let tissue = (0.35 + 0.65 * density) * stroma;
            // eosin-pink stroma on a pale background
            let r = 212.0 - 70.0 * tissue;
            let g = 196.0 - 120.0 * tissue;
            let b = 208.0 - 60.0 * tissue;
            row[x * 3] = r.round() as u8;
            row[x * 3 + 1] = g.round() as u8;
            row[x * 3 + 2] = b.round() as u8;
        }
    });
    let mut img = ImageBuffer::new(width, height, 3, data).expect("positive extent");

    // hematoxylin nuclei, denser where the tissue field is dense
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e75_636c);
    let attempts = (width as u64 * height as u64 / 220) as usize;
    for _ in 0..attempts {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let keep: f64 = rng.random();
        let rx: f64 = rng.random_range(2.0..5.5);
        let ry: f64 = rng.random_range(2.0..5.5);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let darkness: f64 = rng.random_range(0.55..1.0);
        let density = value_noise(cx, cy, 420.0, salt ^ 1);
        if keep > 0.25 + 0.75 * density {
            continue;
        }
        draw_nucleus(&mut img, cx, cy, rx, ry, angle, darkness);
    }
    img
}

fn draw_nucleus(img: &mut ImageBuffer, cx: f64, cy: f64, rx: f64, ry: f64, angle: f64, darkness: f64) {
    let (sin, cos) = angle.sin_cos();
    let r = rx.max(ry).ceil() as i64 + 1;
    let target = [70.0, 40.0, 115.0];
    for y in (cy as i64 - r).max(0)..=(cy as i64 + r).min(img.height() as i64 - 1) {
        for x in (cx as i64 - r).max(0)..=(cx as i64 + r).min(img.width() as i64 - 1) {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = (dx * cos + dy * sin) / rx;
            let v = (-dx * sin + dy * cos) / ry;
            let d = (u * u + v * v).sqrt();
            // soft edge over about one pixel
            let alpha = darkness * (1.0 - ((d - 1.0) * rx.min(ry)).clamp(0.0, 1.0));
            if alpha <= 0.0 {
                continue;
            }
            for c in 0..3u8 {
                let cur = img.get(x as u32, y as u32, c) as f64;
                let v = cur + (target[c as usize] - cur) * alpha;
                img.set(x as u32, y as u32, c, v.round() as u8);
            }
        }
    }
}

// --- sweep simulation ---------------------------------------------------

fn stop_transform(spec: &SweepSpec, x0: f64, y0: f64, theta: f64) -> Transform2D {
    let cx = (spec.frame_width - 1) as f64 / 2.0;
    let cy = (spec.frame_height - 1) as f64 / 2.0;
    Transform2D::translation(x0 + cx, y0 + cy)
        .compose(&Transform2D::similarity(1.0, theta, 0.0, 0.0))
        .compose(&Transform2D::translation(-cx, -cy))
}

fn lerp_transform(a: &Transform2D, b: &Transform2D, t: f64) -> Transform2D {
    let mut m = a.m;
    for (i, row) in m.iter_mut().enumerate().take(2) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a.m[i][j] + (b.m[i][j] - a.m[i][j]) * t;
        }
    }
    Transform2D::from_matrix(a.model.max(b.model), m)
}

/// Lays out stops and the per-frame schedule without rendering pixels.
pub fn plan(spec: &SweepSpec) -> Result<GroundTruth> {
    let (cols, rows) = spec.grid()?;
    let (sx, sy) = spec.step();
    let total = cols * rows;
    let n_stops = spec.max_stops.map_or(total, |m| m.min(total));
    if n_stops == 0 {
        return Err(Error::SpecInfeasible("no stops".into()));
    }
    if spec.pause_frames == 0 {
        return Err(Error::SpecInfeasible("pause_frames must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut stops = Vec::with_capacity(n_stops);
    for s in 0..n_stops {
        let row = s / cols;
        let col = if row % 2 == 0 { s % cols } else { cols - 1 - s % cols };
        let jx = if spec.position_jitter > 0.0 {
            rng.random_range(-spec.position_jitter..=spec.position_jitter)
        } else {
            0.0
        };
        let jy = if spec.position_jitter > 0.0 {
            rng.random_range(-spec.position_jitter..=spec.position_jitter)
        } else {
            0.0
        };
        let theta = if spec.rotation_jitter_deg > 0.0 {
            rng.random_range(-spec.rotation_jitter_deg..=spec.rotation_jitter_deg).to_radians()
        } else {
            0.0
        };
        let brightness = if spec.brightness_jitter > 0.0 {
            1.0 + rng.random_range(-spec.brightness_jitter..=spec.brightness_jitter)
        } else {
            1.0
        };
        let x0 = spec.margin as f64 + (col as u32 * sx) as f64 + jx;
        let y0 = spec.margin as f64 + (row as u32 * sy) as f64 + jy;
        stops.push(StopTruth {
            stop: s,
            col,
            row,
            transform: stop_transform(spec, x0, y0, theta),
            brightness,
        });
    }

    let mut frames: Vec<FrameTruth> = Vec::new();
    let mut pauses = Vec::new();
    let push = |frames: &mut Vec<FrameTruth>, t: Transform2D, stop: Option<usize>, brightness: f64, rng: &mut ChaCha8Rng| {
        let blurred = stop.is_some() && spec.blur_fraction > 0.0 && rng.random::<f64>() < spec.blur_fraction;
        let index = frames.len();
        frames.push(FrameTruth {
            index,
            file: frame_file_name(index),
            transform: t,
            stop,
            brightness,
            blur_sigma: if blurred { spec.blur_sigma } else { 0.0 },
        });
    };
    let pause_at = |frames: &mut Vec<FrameTruth>, pauses: &mut Vec<PauseInterval>, s: &StopTruth, revisit: bool, rng: &mut ChaCha8Rng| {
        let start = frames.len();
        for _ in 0..spec.pause_frames {
            push(frames, s.transform, Some(s.stop), s.brightness, rng);
        }
        pauses.push(PauseInterval {
            start,
            end: frames.len() - 1,
            stop: s.stop,
            revisit,
        });
    };
    let travel = |frames: &mut Vec<FrameTruth>, a: &StopTruth, b: &StopTruth, n: usize, rng: &mut ChaCha8Rng| {
        for k in 1..=n {
            let t = k as f64 / (n + 1) as f64;
            let tr = lerp_transform(&a.transform, &b.transform, t);
            let br = a.brightness + (b.brightness - a.brightness) * t;
            push(frames, tr, None, br, rng);
        }
    };
    for s in 0..n_stops {
        pause_at(&mut frames, &mut pauses, &stops[s], false, &mut rng);
        if spec.revisits.contains(&s) {
            // leave halfway toward a neighbour, then come back
            let other = if s + 1 < n_stops { s + 1 } else { s.saturating_sub(1) };
            let mid_t = lerp_transform(&stops[s].transform, &stops[other].transform, 0.5);
            let mid = StopTruth {
                transform: mid_t,
                ..stops[s].clone()
            };
            let half = (spec.travel_frames / 2).max(1);
            travel(&mut frames, &stops[s], &mid, half, &mut rng);
            push(&mut frames, mid_t, None, stops[s].brightness, &mut rng);
            travel(&mut frames, &mid, &stops[s], half, &mut rng);
            pause_at(&mut frames, &mut pauses, &stops[s], true, &mut rng);
        }
        if s + 1 < n_stops {
            travel(&mut frames, &stops[s], &stops[s + 1], spec.travel_frames, &mut rng);
        }
    }
    Ok(GroundTruth {
        spec: spec.clone(),
        stops,
        pauses,
        frames,
    })
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{:06}.png", index + 1)
}

/// Renders one frame: samples the slide through `t`, scales brightness, blurs.
pub fn render_view(
    slide: &ImageBuffer,
    t: &Transform2D,
    width: u32,
    height: u32,
    brightness: f64,
    blur_sigma: f64,
) -> ImageBuffer {
    let w = width as usize;
    let mut data = vec![0u8; w * height as usize * 3];
    par::for_each_chunk_mut(&mut data, w * 3, |y, row| {
        for x in 0..w {
            let (sx, sy) = t.apply(x as f64, y as f64);
            for c in 0..3u8 {
                let v = sample_bilinear(slide, sx, sy, c).unwrap_or(255.0);
                row[x * 3 + c as usize] = (v * brightness).round().clamp(0.0, 255.0) as u8;
            }
        }
    });
    let img = ImageBuffer::new(width, height, 3, data).expect("positive extent");
    if blur_sigma > 0.0 {
        gaussian_blur(&img, blur_sigma)
    } else {
        img
    }
}

/// In-memory sweep: the slide, every frame, and ground truth.
pub struct Sweep {
    pub slide: ImageBuffer,
    pub truth: GroundTruth,
}

impl Sweep {
    pub fn new(spec: &SweepSpec) -> Result<Sweep> {
        let truth = plan(spec)?;
        let slide = render_slide(spec.slide_width, spec.slide_height, spec.seed);
        Ok(Sweep { slide, truth })
    }

    pub fn frame(&self, index: usize) -> ImageBuffer {
        let f = &self.truth.frames[index];
        let spec = &self.truth.spec;
        render_view(
            &self.slide,
            &f.transform,
            spec.frame_width,
            spec.frame_height,
            f.brightness,
            f.blur_sigma,
        )
    }

    /// One still per stop. Blur is applied to a `blur_fraction` share of stops,
    /// chosen deterministically from the seed.
    pub fn stop_stills(&self) -> Vec<(ImageBuffer, f64)> {
        let spec = &self.truth.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5715_1150);
        let n = self.truth.stops.len();
        let n_blur = (spec.blur_fraction * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let blurred: std::collections::HashSet<usize> = order.into_iter().take(n_blur).collect();
        self.truth
            .stops
            .iter()
            .map(|s| {
                let sigma = if blurred.contains(&s.stop) { spec.blur_sigma } else { 0.0 };
                (
                    render_view(
                        &self.slide,
                        &s.transform,
                        spec.frame_width,
                        spec.frame_height,
                        s.brightness,
                        sigma,
                    ),
                    sigma,
                )
            })
            .collect()
    }
}

/// Writes numbered frames and `ground_truth.json` into `out_dir`.
pub fn generate(spec: &SweepSpec, out_dir: impl AsRef<Path>) -> Result<GroundTruth> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sweep = Sweep::new(spec)?;
    for f in &sweep.truth.frames {
        sweep.frame(f.index).save(out_dir.join(&f.file))?;
    }
    let path = out_dir.join(GROUND_TRUTH_FILE);
    let json = serde_json::to_string_pretty(&sweep.truth).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(sweep.truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SweepSpec {
        SweepSpec {
            slide_width: 900,
            slide_height: 700,
            frame_width: 320,
            frame_height: 240,
            max_stops: Some(4),
            pause_frames: 5,
            travel_frames: 4,
            ..Default::default()
        }
    }

    #[test]
    fn frame_too_large_is_infeasible() {
        let spec = SweepSpec {
            frame_width: 5000,
            ..Default::default()
        };
        assert!(matches!(plan(&spec), Err(Error::SpecInfeasible(_))));
    }

    #[test]
    fn overlap_outside_guidance_is_rejected() {
        let spec = SweepSpec {
            overlap_fraction: 0.5,
            ..Default::default()
        };
        assert!(matches!(plan(&spec), Err(Error::SpecInfeasible(_))));
    }

    #[test]
    fn plan_counts() {
        let spec = SweepSpec {
            max_stops: Some(12),
            ..Default::default()
        };
        let gt = plan(&spec).unwrap();
        assert_eq!(gt.stops.len(), 12);
        assert_eq!(gt.pauses.len(), 12);
        assert_eq!(gt.frames.len(), 12 * 20 + 11 * 8);
        for p in &gt.pauses {
            assert_eq!(p.end - p.start + 1, 20);
        }
    }

    #[test]
    fn adjacent_stops_overlap_as_specified() {
        let spec = SweepSpec::default();
        let gt = plan(&spec).unwrap();
        for w in gt.stops.windows(2) {
            let (ax, ay) = w[0].transform.translation_part();
            let (bx, by) = w[1].transform.translation_part();
            let (ov, extent) = if (ay - by).abs() < 1e-9 {
                (spec.frame_width as f64 - (ax - bx).abs(), spec.frame_width as f64)
            } else {
                (spec.frame_height as f64 - (ay - by).abs(), spec.frame_height as f64)
            };
            assert!((ov - spec.overlap_fraction * extent).abs() <= 1.0, "{ov}");
        }
    }

    #[test]
    fn serpentine_order() {
        let gt = plan(&SweepSpec::default()).unwrap();
        let (cols, _) = SweepSpec::default().grid().unwrap();
        assert_eq!(gt.stops[cols - 1].col, cols - 1);
        assert_eq!(gt.stops[cols].col, cols - 1);
        assert_eq!(gt.stops[cols].row, 1);
    }

    #[test]
    fn exact_crops_without_jitter() {
        let sweep = Sweep::new(&small_spec()).unwrap();
        let s = &sweep.truth.stops[1];
        let (tx, ty) = s.transform.translation_part();
        let crop = sweep.slide.crop(tx as u32, ty as u32, 320, 240).unwrap();
        let f = sweep.truth.pauses[1].start;
        assert_eq!(sweep.frame(f), crop);
    }

    #[test]
    fn same_seed_same_frames() {
        let a = Sweep::new(&small_spec()).unwrap();
        let b = Sweep::new(&small_spec()).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.frame(7), b.frame(7));
    }

    #[test]
    fn revisits_add_pauses() {
        let spec = SweepSpec {
            revisits: vec![1, 2],
            ..small_spec()
        };
        let gt = plan(&spec).unwrap();
        assert_eq!(gt.pauses.len(), 6);
        assert_eq!(gt.pauses.iter().filter(|p| p.revisit).count(), 2);
        for w in gt.pauses.windows(2) {
            assert!(w[0].end < w[1].start);
        }
    }
}

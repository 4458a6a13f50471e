//! Affine co-registration of a stitched mosaic against a scanned reference,
//! and extraction of aligned low/high-quality tile pairs.

use std::fs;
use std::path::Path;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{downscale, gaussian_blur, sample_bilinear, ImageBuffer, Mask, Transform2D, TransformModel};
use crate::par;
use crate::registration::{register, DetectorParams, Features, RansacParams, DEFAULT_RATIO};

/// Name of the pair manifest inside a pairs directory.
pub const PAIR_MANIFEST_FILE: &str = "pairs.json";
pub const LOWQ_DIR: &str = "lowq";
pub const HIGHQ_DIR: &str = "highq";
pub const MIN_TILE: u32 = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoregParams {
    pub max_keypoints: usize,
    pub ratio: f64,
    /// Accepted range of the recovered linear scale after `scale_hint` is
    /// divided out: `[1/max_scale_error, max_scale_error]`.
    pub max_scale_error: f64,
    /// Gauss-Newton iterations of the intensity refinement; 0 disables it.
    pub refine_iterations: usize,
    pub detector: DetectorParams,
    /// Thresholds are in downscaled scanned pixels.
    pub ransac: RansacParams,
}

impl Default for CoregParams {
    fn default() -> Self {
        Self {
            max_keypoints: 4000,
            ratio: DEFAULT_RATIO,
            max_scale_error: 1.5,
            refine_iterations: 30,
            detector: DetectorParams::default(),
            ransac: RansacParams {
                min_inliers: 12,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoregResult {
    /// Stitched pixels to full-resolution scanned pixels.
    pub transform: Transform2D,
    pub inliers: usize,
    pub total_matches: usize,
    /// Residual in full-resolution scanned pixels.
    pub rms_error: f64,
    /// Valid stitched pixels landing on valid scanned pixels, over all stitched pixels.
    pub overlap_fraction: f64,
}

/// Fraction of stitched pixels that are valid and map onto a valid scanned pixel.
pub fn overlap_fraction(stitched: &ImageBuffer, scanned: &ImageBuffer, t: &Transform2D) -> f64 {
    let (w, h) = stitched.dims();
    let src = Mask::from_non_background(stitched);
    let dst = Mask::from_non_background(scanned);
    let (sw, sh) = (scanned.width() as f64, scanned.height() as f64);
    let counts = par::map_range(h as usize, |y| {
        (0..w)
            .filter(|&x| {
                if !src.get(x, y as u32) {
                    return false;
                }
                let (u, v) = t.apply(x as f64, y as f64);
                let (ui, vi) = ((u + 0.5).floor(), (v + 0.5).floor());
                ui >= 0.0 && vi >= 0.0 && ui < sw && vi < sh && dst.get(ui as u32, vi as u32)
            })
            .count()
    });
    counts.iter().sum::<usize>() as f64 / (w as f64 * h as f64)
}

/// Finds the affine transform from `stitched` to `scanned`, where `scanned` is
/// roughly `scale_hint` times larger. Matching runs on the scanned image
/// downscaled by `scale_hint`; the result is expressed at full scanned resolution.
pub fn coregister(
    stitched: &ImageBuffer,
    scanned: &ImageBuffer,
    scale_hint: f64,
    params: &CoregParams,
) -> Result<CoregResult> {
    if !(scale_hint.is_finite() && scale_hint >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "scale_hint must be a finite value >= 1, got {scale_hint}"
        )));
    }
    let small = downscale(scanned, scale_hint);
    let fa = Features::extract(&small, None, &params.detector, params.max_keypoints, 1.0)?;
    let fb = Features::extract(stitched, None, &params.detector, params.max_keypoints, 1.0)?;
    let reg = match register(&fa, &fb, TransformModel::Affine, params.ratio, &params.ransac) {
        Ok(r) => r,
        Err(Error::InsufficientMatches { got, .. }) => {
            return Err(Error::NoConsensus {
                inliers: got,
                min_inliers: params.ransac.min_inliers,
            })
        }
        Err(e) => return Err(e),
    };
    let scale = reg.transform.det2().abs().sqrt();
    let bound = params.max_scale_error.max(1.0);
    if !(scale >= 1.0 / bound && scale <= bound) {
        return Err(Error::NoConsensus {
            inliers: 0,
            min_inliers: params.ransac.min_inliers,
        });
    }
    let small_t = if params.refine_iterations > 0 {
        refine_affine(stitched, &small, &reg.transform, params.refine_iterations)
    } else {
        reg.transform
    };
    let transform = Transform2D::scale(scale_hint).compose(&small_t);
    let transform = Transform2D::from_matrix(TransformModel::Affine, transform.m);
    Ok(CoregResult {
        overlap_fraction: overlap_fraction(stitched, scanned, &transform),
        transform,
        inliers: reg.inliers,
        total_matches: reg.total_matches,
        rms_error: reg.rms_error * scale_hint,
    })
}

/// Smoothed luma as floats, with central-difference gradients.
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f32>,
    gx: Vec<f32>,
    gy: Vec<f32>,
    valid: Mask,
}

impl Plane {
    fn new(img: &ImageBuffer) -> Plane {
        // the blur spreads background into the border, so keep clear of it
        let valid = Mask::from_non_background(img).erode(4);
        let g = gaussian_blur(&img.to_gray(), 1.0);
        let (w, h) = (g.width() as usize, g.height() as usize);
        let v: Vec<f32> = g.data().iter().map(|&p| p as f32).collect();
        let mut gx = vec![0f32; w * h];
        let mut gy = vec![0f32; w * h];
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let i = y * w + x;
                gx[i] = 0.5 * (v[i + 1] - v[i - 1]);
                gy[i] = 0.5 * (v[i + w] - v[i - w]);
            }
        }
        Plane { w, h, v, gx, gy, valid }
    }

    /// Bilinear value and gradient, away from the one-pixel border.
    #[inline]
    fn sample(&self, u: f64, v: f64) -> Option<(f64, f64, f64)> {
        if !(u >= 1.0 && v >= 1.0 && u < (self.w - 2) as f64 && v < (self.h - 2) as f64) {
            return None;
        }
        let (x0, y0) = (u as usize, v as usize);
        if !self.valid.get(x0 as u32, y0 as u32) {
            return None;
        }
        let (ax, ay) = ((u - x0 as f64) as f32, (v - y0 as f64) as f32);
        let i = y0 * self.w + x0;
        let lerp = |p: &[f32]| {
            let top = p[i] + (p[i + 1] - p[i]) * ax;
            let bot = p[i + self.w] + (p[i + self.w + 1] - p[i + self.w]) * ax;
            (top + (bot - top) * ay) as f64
        };
        Some((lerp(&self.v), lerp(&self.gx), lerp(&self.gy)))
    }
}

const REFINE_STEP: usize = 2;
/// Largest corner displacement the refinement may introduce, in pixels.
const REFINE_MAX_SHIFT: f64 = 3.0;

/// Refines an affine `init` (template pixels to image pixels) by Gauss-Newton
/// on intensity differences, with a global gain and bias absorbing exposure
/// differences. Falls back to `init` if the refinement drifts or diverges.
pub fn refine_affine(template: &ImageBuffer, image: &ImageBuffer, init: &Transform2D, iterations: usize) -> Transform2D {
    let tp = Plane::new(template);
    let ip = Plane::new(image);
    let (cx, cy) = (tp.w as f64 / 2.0, tp.h as f64 / 2.0);
    // parameters on centred template coordinates: u = p0 x + p1 y + p2, v = p3 x + p4 y + p5
    let m = &init.m;
    let mut p = [
        m[0][0],
        m[0][1],
        m[0][0] * cx + m[0][1] * cy + m[0][2],
        m[1][0],
        m[1][1],
        m[1][0] * cx + m[1][1] * cy + m[1][2],
        1.0,
        0.0,
    ];
    let to_transform = |p: &[f64; 8]| {
        Transform2D::affine([
            [p[0], p[1], p[2] - p[0] * cx - p[1] * cy],
            [p[3], p[4], p[5] - p[3] * cx - p[4] * cy],
        ])
    };
    let rows: Vec<usize> = (1..tp.h.saturating_sub(1)).step_by(REFINE_STEP).collect();
    let mut best_rms = f64::INFINITY;
    let mut best = *init;
    for _ in 0..iterations {
        let parts = par::map(&rows, |&y| {
            let mut jtj = SMatrix::<f64, 8, 8>::zeros();
            let mut jtr = SVector::<f64, 8>::zeros();
            let (mut sq, mut n) = (0.0, 0usize);
            let yc = y as f64 - cy;
            for x in (1..tp.w - 1).step_by(REFINE_STEP) {
                let ti = y * tp.w + x;
                if !tp.valid.data[ti] {
                    continue;
                }
                let xc = x as f64 - cx;
                let u = p[0] * xc + p[1] * yc + p[2];
                let v = p[3] * xc + p[4] * yc + p[5];
                let Some((val, gx, gy)) = ip.sample(u, v) else { continue };
                let r = p[6] * val + p[7] - tp.v[ti] as f64;
                let (ax, ay) = (p[6] * gx, p[6] * gy);
                let j = SVector::<f64, 8>::from([ax * xc, ax * yc, ax, ay * xc, ay * yc, ay, val, 1.0]);
                jtj += j * j.transpose();
                jtr += j * r;
                sq += r * r;
                n += 1;
            }
            (jtj, jtr, sq, n)
        });
        let (mut jtj, mut jtr, mut sq, mut n) = (SMatrix::<f64, 8, 8>::zeros(), SVector::<f64, 8>::zeros(), 0.0, 0);
        for (a, b, c, d) in parts {
            jtj += a;
            jtr += b;
            sq += c;
            n += d;
        }
        if n < 64 {
            break;
        }
        let rms = (sq / n as f64).sqrt();
        if rms < best_rms {
            best_rms = rms;
            best = to_transform(&p);
        } else {
            break;
        }
        let Some(delta) = jtj.cholesky().map(|c| c.solve(&-jtr)) else { break };
        for (k, d) in delta.iter().enumerate() {
            p[k] += d;
        }
        if delta[2].abs().max(delta[5].abs()) < 1e-4 {
            // one more pass scores the final step
            continue;
        }
    }
    let shift = init
        .map_corners(tp.w as u32, tp.h as u32)
        .iter()
        .zip(best.map_corners(tp.w as u32, tp.h as u32).iter())
        .map(|(a, b)| (a.0 - b.0).hypot(a.1 - b.1))
        .fold(0.0, f64::max);
    if shift > REFINE_MAX_SHIFT {
        return *init;
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.75,
            val: 0.25,
            test: 0.0,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "split ratios must be non-negative and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

/// FNV-1a over the key bytes, finished with a splitmix64 avalanche.
fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Split for the tile at `origin` of slide `slide_id`; depends on nothing else.
pub fn assign_split(slide_id: &str, origin: (u32, u32), ratios: &SplitRatios) -> Split {
    let key = format!("{slide_id}:{}:{}", origin.0, origin.1);
    let u = (stable_hash(key.as_bytes()) >> 11) as f64 / (1u64 << 53) as f64;
    if u < ratios.train {
        Split::Train
    } else if u < ratios.train + ratios.val || ratios.test == 0.0 {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairParams {
    pub slide_id: String,
    /// Low-quality tile side.
    pub tile: u32,
    pub stride: u32,
    /// Magnification ratio between the scanned and stitched images.
    pub scale: u32,
    /// Minimum fraction of valid stitched pixels in a tile.
    pub valid_min: f64,
    pub splits: SplitRatios,
}

impl Default for PairParams {
    fn default() -> Self {
        Self {
            slide_id: "slide".into(),
            tile: 256,
            stride: 224,
            scale: 4,
            valid_min: 0.9,
            splits: SplitRatios::default(),
        }
    }
}

impl PairParams {
    pub fn validate(&self) -> Result<()> {
        if self.tile < MIN_TILE || self.stride < MIN_TILE {
            return Err(Error::InvalidParameter(format!(
                "tile and stride must be >= {MIN_TILE}, got {} and {}",
                self.tile, self.stride
            )));
        }
        if self.scale == 0 {
            return Err(Error::InvalidParameter("scale must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.valid_min) {
            return Err(Error::InvalidParameter(format!("valid_min {} outside [0, 1]", self.valid_min)));
        }
        if self.slide_id.is_empty() || self.slide_id.contains(['/', '\\']) {
            return Err(Error::InvalidParameter(format!("unusable slide id {:?}", self.slide_id)));
        }
        self.splits.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TilePair {
    pub lowq: ImageBuffer,
    /// `scale` times the low-quality extent in both dimensions.
    pub highq: ImageBuffer,
    /// Top-left corner in stitched pixels.
    pub origin: (u32, u32),
    pub split: Split,
    pub valid_fraction: f64,
}

impl TilePair {
    pub fn id(&self, slide_id: &str) -> String {
        format!("{slide_id}_{}_{}", self.origin.0, self.origin.1)
    }
}

/// Resamples the scanned image onto the `s`-times finer grid of the stitched
/// tile at `origin`. High-quality pixel `i` sits at stitched coordinate
/// `origin + (i + 0.5) / s - 0.5`. `None` if any sample leaves the scanned image.
fn resample_highq(scanned: &ImageBuffer, t: &Transform2D, origin: (u32, u32), tile: u32, s: u32) -> Option<ImageBuffer> {
    let side = tile * s;
    let ch = scanned.channels();
    let sf = s as f64;
    let at = |i: u32, o: u32| o as f64 + (i as f64 + 0.5) / sf - 0.5;
    // an affine image of a square is convex, so its corners bound it
    for (i, j) in [(0, 0), (side - 1, 0), (0, side - 1), (side - 1, side - 1)] {
        let (u, v) = t.apply(at(i, origin.0), at(j, origin.1));
        sample_bilinear(scanned, u, v, 0)?;
    }
    let mut data = vec![0u8; side as usize * side as usize * ch as usize];
    for (j, row) in data.chunks_exact_mut(side as usize * ch as usize).enumerate() {
        let y = at(j as u32, origin.1);
        for i in 0..side {
            let (u, v) = t.apply(at(i, origin.0), y);
            for c in 0..ch {
                let val = sample_bilinear(scanned, u, v, c).unwrap_or(255.0);
                row[i as usize * ch as usize + c as usize] = val.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Some(ImageBuffer::new(side, side, ch, data).expect("positive extent"))
}

/// Slides a `tile x tile` window over the stitched image and pairs every tile
/// that is mostly valid with its scanned counterpart. Tiles are returned in
/// row-major grid order.
pub fn extract_pairs(
    stitched: &ImageBuffer,
    scanned: &ImageBuffer,
    coreg: &CoregResult,
    params: &PairParams,
) -> Result<Vec<TilePair>> {
    params.validate()?;
    coreg.transform.invert()?;
    let (w, h) = stitched.dims();
    let t = params.tile;
    if w < t || h < t {
        return Err(Error::NoValidTiles);
    }
    let origins: Vec<(u32, u32)> = (0..=(h - t) / params.stride)
        .flat_map(|r| (0..=(w - t) / params.stride).map(move |c| (c * params.stride, r * params.stride)))
        .collect();
    let valid = Mask::from_non_background(stitched);
    let pairs = par::map(&origins, |&(x, y)| -> Result<Option<TilePair>> {
        let count = (y..y + t).map(|yy| (x..x + t).filter(|&xx| valid.get(xx, yy)).count()).sum::<usize>();
        let fraction = count as f64 / (t as f64 * t as f64);
        if fraction < params.valid_min || count == 0 {
            return Ok(None);
        }
        let Some(highq) = resample_highq(scanned, &coreg.transform, (x, y), t, params.scale) else {
            return Ok(None);
        };
        Ok(Some(TilePair {
            lowq: stitched.crop(x, y, t, t)?,
            highq,
            origin: (x, y),
            split: assign_split(&params.slide_id, (x, y), &params.splits),
            valid_fraction: fraction,
        }))
    });
    let pairs: Vec<TilePair> = pairs.into_iter().filter_map(Result::transpose).collect::<Result<_>>()?;
    if pairs.is_empty() {
        return Err(Error::NoValidTiles);
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub origin: [u32; 2],
    pub split: Split,
    /// Relative to the pairs directory.
    pub lowq: String,
    pub highq: String,
    pub lowq_size: [u32; 2],
    pub highq_size: [u32; 2],
    pub valid_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Contract between this crate and downstream consumers of tile pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub format_version: u32,
    pub slide_id: String,
    pub params: PairParams,
    pub coreg: CoregResult,
    pub counts: SplitCounts,
    pub pairs: Vec<PairRecord>,
}

impl PairManifest {
    pub fn new(pairs: &[TilePair], coreg: &CoregResult, params: &PairParams) -> Self {
        let mut counts = SplitCounts::default();
        let records = pairs
            .iter()
            .map(|p| {
                match p.split {
                    Split::Train => counts.train += 1,
                    Split::Val => counts.val += 1,
                    Split::Test => counts.test += 1,
                }
                let id = p.id(&params.slide_id);
                PairRecord {
                    lowq: format!("{LOWQ_DIR}/{id}.png"),
                    highq: format!("{HIGHQ_DIR}/{id}.png"),
                    id,
                    origin: [p.origin.0, p.origin.1],
                    split: p.split,
                    lowq_size: [p.lowq.width(), p.lowq.height()],
                    highq_size: [p.highq.width(), p.highq.height()],
                    valid_fraction: p.valid_fraction,
                }
            })
            .collect();
        Self {
            format_version: 1,
            slide_id: params.slide_id.clone(),
            params: params.clone(),
            coreg: coreg.clone(),
            counts,
            pairs: records,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Writes `lowq/`, `highq/` and the manifest (last) under `out_dir`.
pub fn write_pairs(
    out_dir: impl AsRef<Path>,
    pairs: &[TilePair],
    coreg: &CoregResult,
    params: &PairParams,
) -> Result<PairManifest> {
    let out = out_dir.as_ref();
    for d in [LOWQ_DIR, HIGHQ_DIR] {
        fs::create_dir_all(out.join(d)).map_err(|e| Error::io(out.join(d), e))?;
    }
    let manifest = PairManifest::new(pairs, coreg, params);
    par::map(&manifest.pairs.iter().zip(pairs).collect::<Vec<_>>(), |(rec, p)| {
        p.lowq.save(out.join(&rec.lowq))?;
        p.highq.save(out.join(&rec.highq))
    })
    .into_iter()
    .collect::<Result<()>>()?;
    let path = out.join(PAIR_MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

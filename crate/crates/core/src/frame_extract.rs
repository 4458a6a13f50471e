//! Pause-frame extraction: block-matching motion, pause segmentation,
//! sharpest-frame selection and consecutive de-duplication.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{focus_score, FocusScore, ImageBuffer};
use crate::par;

/// Mean block displacement between two frames, in pixels per frame.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MotionScore(pub f64);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionParams {
    /// Block side in pixels.
    pub block: u32,
    /// Maximum displacement searched along each axis.
    pub radius: u32,
    /// Spacing between block origins.
    pub grid: u32,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            block: 32,
            radius: 16,
            grid: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionEstimate {
    pub score: MotionScore,
    /// Set when no block in either frame carried enough texture to match.
    pub low_texture: bool,
    pub blocks: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PauseSegment {
    pub start_idx: usize,
    pub end_idx: usize,
    pub representative_idx: usize,
}

impl PauseSegment {
    pub fn len(&self) -> usize {
        self.end_idx - self.start_idx + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// An extracted frame and where it came from.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub image: ImageBuffer,
    pub seq_index: usize,
    /// Inclusive range of source video frames this record stands for.
    pub source_indices: (usize, usize),
    /// Source frame the image was taken from.
    pub source_frame: usize,
    pub motion: MotionScore,
    pub focus: FocusScore,
}

impl FrameRecord {
    /// Wraps a bare image (e.g. a still) as a record.
    pub fn from_image(seq_index: usize, image: ImageBuffer) -> Result<FrameRecord> {
        let focus = focus_score(&image)?;
        Ok(FrameRecord {
            image,
            seq_index,
            source_indices: (seq_index, seq_index),
            source_frame: seq_index,
            motion: MotionScore(0.0),
            focus,
        })
    }
}

// --- block matching ------------------------------------------------------

/// Gray plane stored as f32 for the matcher.
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f32>,
}

impl Plane {
    fn from_gray(img: &ImageBuffer) -> Plane {
        let g = img.to_gray();
        Plane {
            w: g.width() as usize,
            h: g.height() as usize,
            v: g.data().iter().map(|&x| x as f32).collect(),
        }
    }

    fn half(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                v.push(0.25 * (self.v[i] + self.v[i + 1] + self.v[i + self.w] + self.v[i + self.w + 1]));
            }
        }
        Plane { w, h, v }
    }
}

struct BlockStats {
    mean: f64,
    norm: f64,
}

fn block_stats(p: &Plane, x: usize, y: usize, size: usize) -> BlockStats {
    let mut s = 0.0f64;
    let mut ss = 0.0f64;
    for yy in y..y + size {
        for &v in &p.v[yy * p.w + x..yy * p.w + x + size] {
            s += v as f64;
            ss += (v as f64) * (v as f64);
        }
    }
    let n = (size * size) as f64;
    let mean = s / n;
    BlockStats {
        mean,
        norm: (ss - n * mean * mean).max(0.0).sqrt(),
    }
}

/// Zero-normalized cross-correlation between the block of `a` at (ax, ay)
/// and the block of `b` at (bx, by).
#[allow(clippy::too_many_arguments)]
fn ncc(a: &Plane, sa: &BlockStats, ax: usize, ay: usize, b: &Plane, bx: usize, by: usize, size: usize) -> f64 {
    let mut sb = 0.0f64;
    let mut sbb = 0.0f64;
    let mut sab = 0.0f64;
    for r in 0..size {
        let ra = &a.v[(ay + r) * a.w + ax..(ay + r) * a.w + ax + size];
        let rb = &b.v[(by + r) * b.w + bx..(by + r) * b.w + bx + size];
        let mut rsb = 0.0f32;
        let mut rsbb = 0.0f32;
        let mut rsab = 0.0f32;
        for (&va, &vb) in ra.iter().zip(rb) {
            rsb += vb;
            rsbb += vb * vb;
            rsab += va * vb;
        }
        sb += rsb as f64;
        sbb += rsbb as f64;
        sab += rsab as f64;
    }
    let n = (size * size) as f64;
    let mb = sb / n;
    let nb = (sbb - n * mb * mb).max(0.0).sqrt();
    if nb < 1e-9 || sa.norm < 1e-9 {
        return -1.0;
    }
    (sab - n * sa.mean * mb) / (sa.norm * nb)
}

/// Minimum per-block standard deviation (gray levels) for a block to count.
const MIN_BLOCK_STD: f64 = 2.0;

/// Searches `b` for each textured block of `a`; returns mean displacement
/// magnitude and the number of textured blocks.
fn directional_motion(a: &Plane, a2: &Plane, b: &Plane, b2: &Plane, params: &MotionParams) -> (f64, usize) {
    let block = params.block as usize;
    let radius = params.radius as usize;
    let grid = params.grid.max(1) as usize;
    if a.w < block + 2 * radius || a.h < block + 2 * radius {
        return (0.0, 0);
    }
    let span_x = a.w - block - 2 * radius;
    let span_y = a.h - block - 2 * radius;
    let x0 = radius + (span_x % grid) / 2;
    let y0 = radius + (span_y % grid) / 2;
    let mut origins = Vec::new();
    let mut y = y0;
    while y <= radius + span_y {
        let mut x = x0;
        while x <= radius + span_x {
            origins.push((x, y));
            x += grid;
        }
        y += grid;
    }
    let hb = block / 2;
    let hr = (radius / 2) as i64;
    let mut total = 0.0;
    let mut counted = 0;
    for (bx, by) in origins {
        let sa = block_stats(a, bx, by, block);
        if sa.norm / (block as f64) < MIN_BLOCK_STD {
            continue;
        }
        // coarse search at half resolution
        let (cx, cy) = (bx / 2, by / 2);
        let sa2 = block_stats(a2, cx, cy, hb);
        let mut best = (f64::NEG_INFINITY, 0i64, 0i64);
        for dy in -hr..=hr {
            for dx in -hr..=hr {
                let (tx, ty) = (cx as i64 + dx, cy as i64 + dy);
                if tx < 0 || ty < 0 || tx as usize + hb > b2.w || ty as usize + hb > b2.h {
                    continue;
                }
                let s = ncc(a2, &sa2, cx, cy, b2, tx as usize, ty as usize, hb);
                if better(s, dx, dy, best) {
                    best = (s, dx, dy);
                }
            }
        }
        // refine at full resolution around the doubled coarse estimate
        let (gx, gy) = (2 * best.1, 2 * best.2);
        let r = radius as i64;
        let mut fine = (f64::NEG_INFINITY, 0i64, 0i64);
        for dy in (gy - 1).max(-r)..=(gy + 1).min(r) {
            for dx in (gx - 1).max(-r)..=(gx + 1).min(r) {
                let (tx, ty) = (bx as i64 + dx, by as i64 + dy);
                let s = ncc(a, &sa, bx, by, b, tx as usize, ty as usize, block);
                if better(s, dx, dy, fine) {
                    fine = (s, dx, dy);
                }
            }
        }
        // the zero-displacement hypothesis is always checked so still blocks read exactly 0
        let s0 = ncc(a, &sa, bx, by, b, bx, by, block);
        if better(s0, 0, 0, fine) {
            fine = (s0, 0, 0);
        }
        total += ((fine.1 * fine.1 + fine.2 * fine.2) as f64).sqrt();
        counted += 1;
    }
    (total, counted)
}

#[inline]
fn better(s: f64, dx: i64, dy: i64, cur: (f64, i64, i64)) -> bool {
    const EPS: f64 = 1e-9;
    if s > cur.0 + EPS {
        return true;
    }
    if s >= cur.0 - EPS {
        let m = dx * dx + dy * dy;
        let mc = cur.1 * cur.1 + cur.2 * cur.2;
        return m < mc || (m == mc && (dy, dx) < (cur.2, cur.1));
    }
    false
}

/// Prepared frame for repeated motion queries.
pub struct MotionFrame {
    full: Plane,
    half: Plane,
}

impl MotionFrame {
    pub fn new(img: &ImageBuffer) -> MotionFrame {
        let full = Plane::from_gray(img);
        let half = full.half();
        MotionFrame { full, half }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.full.w, self.full.h)
    }
}

/// Symmetric motion estimate between two prepared frames.
pub fn motion_between_prepared(a: &MotionFrame, b: &MotionFrame, params: &MotionParams) -> Result<MotionEstimate> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(
            a.full.w as u32,
            a.full.h as u32,
            b.full.w as u32,
            b.full.h as u32,
        ));
    }
    let (fs, fc) = directional_motion(&a.full, &a.half, &b.full, &b.half, params);
    let (bs, bc) = directional_motion(&b.full, &b.half, &a.full, &a.half, params);
    let mean = |s: f64, c: usize| if c > 0 { s / c as f64 } else { 0.0 };
    Ok(MotionEstimate {
        score: MotionScore(0.5 * (mean(fs, fc) + mean(bs, bc))),
        low_texture: fc == 0 && bc == 0,
        blocks: fc + bc,
    })
}

/// Block-matching motion between `a` and `b` with block side `block`.
pub fn motion_between(a: &ImageBuffer, b: &ImageBuffer, block: u32) -> Result<MotionEstimate> {
    if a.dims() != b.dims() {
        let (aw, ah) = a.dims();
        let (bw, bh) = b.dims();
        return Err(Error::DimensionMismatch(aw, ah, bw, bh));
    }
    let params = MotionParams {
        block,
        ..Default::default()
    };
    motion_between_prepared(&MotionFrame::new(a), &MotionFrame::new(b), &params)
}

// --- segmentation --------------------------------------------------------

/// Maximal runs of still pairs (`pair_scores[i]` is the motion between frames
/// `i` and `i + 1`) spanning at least `min_len` frames.
pub fn segment_from_scores(
    pair_scores: &[f64],
    focus: &[f64],
    motion_threshold: f64,
    min_len: usize,
) -> Vec<PauseSegment> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < pair_scores.len() {
        if pair_scores[i] >= motion_threshold {
            i += 1;
            continue;
        }
        let start = i;
        while i < pair_scores.len() && pair_scores[i] < motion_threshold {
            i += 1;
        }
        let end = i; // frame index of the last still frame
        if end - start + 1 >= min_len.max(1) {
            out.push(PauseSegment {
                start_idx: start,
                end_idx: end,
                representative_idx: sharpest(focus, start, end),
            });
        }
    }
    out
}

/// Index of the maximum focus in `[start, end]`; ties go to the lowest index.
fn sharpest(focus: &[f64], start: usize, end: usize) -> usize {
    let mut best = start;
    for i in start..=end {
        if focus[i] > focus[best] {
            best = i;
        }
    }
    best
}

/// Splits `frames` into pause segments using stride-1 motion scoring.
pub fn segment_pauses(frames: &[ImageBuffer], motion_threshold: f64, min_len: usize) -> Result<Vec<PauseSegment>> {
    if frames.len() < 2 {
        return Err(Error::InvalidParameter("need at least two frames".into()));
    }
    if motion_threshold <= 0.0 {
        return Err(Error::InvalidParameter("motion threshold must be positive".into()));
    }
    let prepared: Vec<MotionFrame> = par::map(frames, MotionFrame::new);
    let params = MotionParams::default();
    let scores = par::map_range(frames.len() - 1, |i| {
        motion_between_prepared(&prepared[i], &prepared[i + 1], &params).map(|m| m.score.0)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let focus = par::map(frames, |f| focus_score(f).map(|s| s.0))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(segment_from_scores(&scores, &focus, motion_threshold, min_len))
}

// --- de-duplication ------------------------------------------------------

/// Zero-normalized cross-correlation of two whole images (luma).
pub fn image_ncc(a: &ImageBuffer, b: &ImageBuffer) -> Option<f64> {
    if a.dims() != b.dims() {
        return None;
    }
    let ga = a.to_gray();
    let gb = b.to_gray();
    let n = ga.data().len() as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in ga.data().iter().zip(gb.data()) {
        let (x, y) = (x as f64, y as f64);
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 0.0 || vb <= 0.0 {
        // flat images correlate only if they are the same constant
        return Some(if ga.data() == gb.data() { 1.0 } else { 0.0 });
    }
    Some((sab - sa * sb / n) / (va * vb).sqrt())
}

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.995;

/// Drops a record when it correlates with the previous kept record at or above
/// `sim_threshold`; re-packs `seq_index`.
pub fn deduplicate(records: Vec<FrameRecord>, sim_threshold: f64) -> Vec<FrameRecord> {
    deduplicate_with_log(records, sim_threshold).0
}

/// Like [`deduplicate`], also returning `(dropped source frame, kept source frame, ncc)`.
pub fn deduplicate_with_log(records: Vec<FrameRecord>, sim_threshold: f64) -> (Vec<FrameRecord>, Vec<(usize, usize, f64)>) {
    let mut kept: Vec<FrameRecord> = Vec::with_capacity(records.len());
    let mut dropped = Vec::new();
    for r in records {
        if let Some(last) = kept.last() {
            if let Some(c) = image_ncc(&last.image, &r.image) {
                if c >= sim_threshold {
                    dropped.push((r.source_frame, last.source_frame, c));
                    continue;
                }
            }
        }
        kept.push(r);
    }
    for (i, r) in kept.iter_mut().enumerate() {
        r.seq_index = i;
    }
    (kept, dropped)
}

// --- full extraction -----------------------------------------------------

/// Anything that can hand out numbered frames.
pub trait FrameSource: Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<ImageBuffer>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FrameSource for [ImageBuffer] {
    fn len(&self) -> usize {
        <[ImageBuffer]>::len(self)
    }

    fn load(&self, index: usize) -> Result<ImageBuffer> {
        Ok(self[index].clone())
    }
}

impl FrameSource for Vec<ImageBuffer> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn load(&self, index: usize) -> Result<ImageBuffer> {
        Ok(self[index].clone())
    }
}

/// Numbered image files in a directory, ordered by the last run of digits in
/// each file stem (`frame_000001.png`, `frame_000002.png`, ...).
pub struct DirSource {
    pub paths: Vec<PathBuf>,
}

impl DirSource {
    pub fn open(dir: impl AsRef<Path>) -> Result<DirSource> {
        let dir = dir.as_ref();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut numbered = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| e.to_ascii_lowercase());
            if !matches!(ext.as_deref(), Some("png") | Some("jpg") | Some("jpeg")) {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let digits: String = stem
                .chars()
                .rev()
                .skip_while(|c| !c.is_ascii_digit())
                .take_while(|c| c.is_ascii_digit())
                .collect::<Vec<_>>()
                .into_iter()
                .rev()
                .collect();
            if let Ok(n) = digits.parse::<u64>() {
                numbered.push((n, path));
            }
        }
        if numbered.is_empty() {
            return Err(Error::NoFramesFound(dir.to_path_buf()));
        }
        numbered.sort();
        Ok(DirSource {
            paths: numbered.into_iter().map(|(_, p)| p).collect(),
        })
    }
}

impl FrameSource for DirSource {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn load(&self, index: usize) -> Result<ImageBuffer> {
        ImageBuffer::load(&self.paths[index])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionParams {
    /// Pixels per frame below which a pair counts as still.
    pub motion_threshold: f64,
    /// Capture rate; sets the default minimum pause length.
    pub fps: f64,
    /// Minimum pause length in frames; defaults to `ceil(0.5 * fps)`.
    pub min_len: Option<usize>,
    /// Score every `stride`-th pair (frames `i` and `i + stride`).
    pub stride: usize,
    pub motion: MotionParams,
    pub dedup_threshold: f64,
    /// Frames decoded per chunk.
    pub chunk: usize,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self {
            motion_threshold: 1.5,
            fps: 30.0,
            min_len: None,
            stride: 2,
            motion: MotionParams::default(),
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            chunk: 32,
        }
    }
}

impl ExtractionParams {
    pub fn effective_min_len(&self) -> usize {
        self.min_len
            .unwrap_or_else(|| (0.5 * self.fps).ceil() as usize)
            .max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentLog {
    pub start: usize,
    pub end: usize,
    pub representative: usize,
    pub representative_focus: f64,
    pub mean_motion: f64,
    /// Set when de-duplication removed this segment's representative.
    pub duplicate_of: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionLog {
    pub frame_count: usize,
    pub params: ExtractionParams,
    pub min_len: usize,
    /// `(i, j, motion per frame)` for every scored pair.
    pub pair_scores: Vec<(usize, usize, f64)>,
    pub segments: Vec<SegmentLog>,
    pub records: usize,
}

pub struct Extraction {
    pub records: Vec<FrameRecord>,
    pub log: ExtractionLog,
}

/// Full extraction over a directory of numbered frames.
pub fn extract_frames(frame_dir: impl AsRef<Path>, params: &ExtractionParams) -> Result<Extraction> {
    let src = DirSource::open(frame_dir)?;
    extract_from_source(&src, params)
}

/// Full extraction over any frame source.
pub fn extract_from_source<S: FrameSource + ?Sized>(src: &S, params: &ExtractionParams) -> Result<Extraction> {
    let n = src.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("need at least two frames, got {n}")));
    }
    if params.motion_threshold <= 0.0 {
        return Err(Error::InvalidParameter("motion threshold must be positive".into()));
    }
    let stride = params.stride.max(1);
    let min_len = params.effective_min_len();
    let chunk = params.chunk.max(stride + 1);
    let label = |i: usize| -> PathBuf {
        PathBuf::from(format!("frame #{i}"))
    };

    // pass 1: focus for every frame, motion for sampled pairs (i, i + stride)
    let mut focus = vec![0.0; n];
    let mut sampled: Vec<(usize, usize, f64)> = Vec::new();
    let mut expected_dims: Option<(u32, u32)> = None;
    let mut window: HashMap<usize, MotionFrame> = HashMap::new();
    let mut c0 = 0;
    while c0 < n {
        let c1 = (c0 + chunk).min(n);
        let loaded = par::map_range(c1 - c0, |k| -> Result<(ImageBuffer, f64)> {
            let img = src.load(c0 + k)?;
            let f = focus_score(&img)?.0;
            Ok((img, f))
        });
        let mut prepared = Vec::with_capacity(c1 - c0);
        for (k, r) in loaded.into_iter().enumerate() {
            let (img, f) = r?;
            let dims = img.dims();
            match expected_dims {
                None => expected_dims = Some(dims),
                Some(e) if e != dims => {
                    return Err(Error::InconsistentDimensions {
                        path: label(c0 + k),
                        got: dims,
                        expected: e,
                    })
                }
                _ => {}
            }
            focus[c0 + k] = f;
            prepared.push(img);
        }
        let frames = par::map(&prepared, MotionFrame::new);
        for (k, f) in frames.into_iter().enumerate() {
            window.insert(c0 + k, f);
        }
        let pairs: Vec<usize> = (0..n)
            .step_by(stride)
            .filter(|&i| i + stride < n && i + stride >= c0 && i + stride < c1)
            .collect();
        let scores = par::map(&pairs, |&i| {
            motion_between_prepared(&window[&i], &window[&(i + stride)], &params.motion)
                .map(|m| m.score.0 / stride as f64)
        });
        for (i, s) in pairs.into_iter().zip(scores) {
            sampled.push((i, i + stride, s?));
        }
        // only the last `stride` frames can pair with the next chunk
        window.retain(|&k, _| k + stride >= c1);
        c0 = c1;
    }

    // coarse segments on the sampled grid
    let still: Vec<bool> = sampled.iter().map(|s| s.2 < params.motion_threshold).collect();
    let mut coarse: Vec<(usize, usize)> = Vec::new();
    let mut k = 0;
    while k < sampled.len() {
        if !still[k] {
            k += 1;
            continue;
        }
        let first = k;
        while k < sampled.len() && still[k] {
            k += 1;
        }
        coarse.push((sampled[first].0, sampled[k - 1].1));
    }

    // refine boundaries with stride-1 pairs
    let mut cache: HashMap<usize, MotionFrame> = HashMap::new();
    let pair_still = |i: usize, cache: &mut HashMap<usize, MotionFrame>, log: &mut Vec<(usize, usize, f64)>| -> Result<bool> {
        for j in [i, i + 1] {
            if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(j) {
                e.insert(MotionFrame::new(&src.load(j)?));
            }
        }
        let s = motion_between_prepared(&cache[&i], &cache[&(i + 1)], &params.motion)?.score.0;
        log.push((i, i + 1, s));
        Ok(s < params.motion_threshold)
    };
    let mut refined: Vec<(usize, usize)> = Vec::new();
    let mut refine_log = Vec::new();
    for (start, end) in coarse {
        let floor = refined.last().map_or(0, |r: &(usize, usize)| r.1 + 1);
        let mut s = start;
        for _ in 1..stride {
            if s == 0 || s - 1 < floor || !pair_still(s - 1, &mut cache, &mut refine_log)? {
                break;
            }
            s -= 1;
        }
        let mut e = end;
        for _ in 1..stride.max(2) {
            if e + 1 >= n || !pair_still(e, &mut cache, &mut refine_log)? {
                break;
            }
            e += 1;
        }
        if e - s + 1 >= min_len {
            refined.push((s, e));
        }
        cache.retain(|&k, _| k + 1 >= e);
    }

    // representatives and records
    let mut records = Vec::with_capacity(refined.len());
    let mut segments = Vec::with_capacity(refined.len());
    for (seq, &(s, e)) in refined.iter().enumerate() {
        let rep = sharpest(&focus, s, e);
        let inside: Vec<f64> = sampled
            .iter()
            .filter(|p| p.0 >= s && p.1 <= e)
            .map(|p| p.2)
            .collect();
        let mean_motion = if inside.is_empty() {
            0.0
        } else {
            inside.iter().sum::<f64>() / inside.len() as f64
        };
        records.push(FrameRecord {
            image: src.load(rep)?,
            seq_index: seq,
            source_indices: (s, e),
            source_frame: rep,
            motion: MotionScore(mean_motion),
            focus: FocusScore(focus[rep]),
        });
        segments.push(SegmentLog {
            start: s,
            end: e,
            representative: rep,
            representative_focus: focus[rep],
            mean_motion,
            duplicate_of: None,
        });
    }
    let (records, dropped) = deduplicate_with_log(records, params.dedup_threshold);
    for (dup, kept, _) in dropped {
        if let Some(seg) = segments.iter_mut().find(|s| s.representative == dup) {
            seg.duplicate_of = Some(kept);
        }
    }
    let mut pair_scores = sampled;
    pair_scores.extend(refine_log);
    pair_scores.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    pair_scores.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    let log = ExtractionLog {
        frame_count: n,
        params: params.clone(),
        min_len,
        pair_scores,
        segments,
        records: records.len(),
    };
    Ok(Extraction { records, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::gaussian_blur;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: u32, h: u32, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = (0..w * h).map(|_| rng.random()).collect();
        gaussian_blur(&ImageBuffer::new(w, h, 1, data).unwrap(), 1.0)
    }

    fn shifted(img: &ImageBuffer, dx: i64, dy: i64) -> ImageBuffer {
        ImageBuffer::from_gray_fn(img.width(), img.height(), |x, y| {
            let sx = (x as i64 - dx).clamp(0, img.width() as i64 - 1) as u32;
            let sy = (y as i64 - dy).clamp(0, img.height() as i64 - 1) as u32;
            img.get(sx, sy, 0)
        })
    }

    #[test]
    fn identical_frames_have_zero_motion() {
        let f = noise(256, 192, 1);
        let m = motion_between(&f, &f, 32).unwrap();
        assert_eq!(m.score.0, 0.0);
        assert!(!m.low_texture);
    }

    #[test]
    fn known_shift_is_recovered() {
        let a = noise(320, 240, 2);
        let b = shifted(&a, 6, 0);
        let m = motion_between(&a, &b, 32).unwrap();
        assert!((5.0..=7.0).contains(&m.score.0), "{}", m.score.0);
    }

    #[test]
    fn uniform_white_is_low_texture() {
        let w = ImageBuffer::filled(200, 150, 3, 255);
        let m = motion_between(&w, &w, 32).unwrap();
        assert_eq!(m.score.0, 0.0);
        assert!(m.low_texture);
    }

    #[test]
    fn mismatched_dims() {
        let r = motion_between(&noise(100, 100, 1), &noise(100, 90, 1), 32);
        assert!(matches!(r, Err(Error::DimensionMismatch(..))));
    }

    #[test]
    fn motion_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 0..20 {
            let a = noise(192, 160, 100 + k);
            let b = shifted(&a, rng.random_range(-8..=8), rng.random_range(-8..=8));
            let ab = motion_between(&a, &b, 32).unwrap().score.0;
            let ba = motion_between(&b, &a, 32).unwrap().score.0;
            assert!((ab - ba).abs() <= 1e-6);
        }
    }

    #[test]
    fn identical_run_is_one_segment() {
        let f = noise(160, 120, 3);
        let frames = vec![f; 30];
        let segs = segment_pauses(&frames, 1.0, 3).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!((segs[0].start_idx, segs[0].end_idx, segs[0].representative_idx), (0, 29, 0));
    }

    #[test]
    fn large_shift_gives_no_segment() {
        let a = noise(200, 160, 4);
        let b = shifted(&a, 12, 9);
        assert!(segment_pauses(&[a, b], 1.0, 2).unwrap().is_empty());
    }

    #[test]
    fn planted_pauses_from_scores() {
        // generator: alternate still and moving runs, five still runs planted
        let planted = [(0usize, 9usize), (14, 25), (30, 37), (45, 60), (66, 70)];
        let n = 75;
        let mut scores = vec![5.0; n - 1];
        for &(s, e) in &planted {
            for sc in scores.iter_mut().take(e).skip(s) {
                *sc = 0.2;
            }
        }
        let focus = vec![1.0; n];
        let segs = segment_from_scores(&scores, &focus, 1.5, 3);
        let got: Vec<(usize, usize)> = segs.iter().map(|s| (s.start_idx, s.end_idx)).collect();
        assert_eq!(got, planted);
    }

    #[test]
    fn sharpest_frame_represents_segment() {
        let sharp = noise(160, 120, 5);
        let blurred = gaussian_blur(&sharp, 2.0);
        let frames = vec![blurred.clone(), blurred.clone(), sharp, blurred.clone(), blurred];
        let segs = segment_pauses(&frames, 1.5, 3).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].representative_idx, 2);
    }

    fn record(seq: usize, img: ImageBuffer) -> FrameRecord {
        FrameRecord::from_image(seq, img).unwrap()
    }

    #[test]
    fn exact_duplicate_is_dropped() {
        let f = noise(64, 64, 6);
        let out = deduplicate(vec![record(0, f.clone()), record(1, f)], DEFAULT_DEDUP_THRESHOLD);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn distinct_tiles_are_kept() {
        let tiles: Vec<ImageBuffer> = (0..10).map(|k| noise(64, 64, 50 + k)).collect();
        // independent NCC oracle over all pairs
        for i in 0..10 {
            for j in i + 1..10 {
                assert!(image_ncc(&tiles[i], &tiles[j]).unwrap().abs() < 0.2);
            }
        }
        let recs = tiles.into_iter().enumerate().map(|(i, t)| record(i, t)).collect();
        let out = deduplicate(recs, DEFAULT_DEDUP_THRESHOLD);
        assert_eq!(out.len(), 10);
        assert!(out.iter().enumerate().all(|(i, r)| r.seq_index == i));
    }

    #[test]
    fn empty_dedup() {
        assert!(deduplicate(Vec::new(), 0.995).is_empty());
    }

    #[test]
    fn dedup_is_idempotent() {
        let a = noise(48, 48, 7);
        let b = noise(48, 48, 8);
        let recs = vec![
            record(0, a.clone()),
            record(1, a.clone()),
            record(2, b.clone()),
            record(3, b),
            record(4, a),
        ];
        let once = deduplicate(recs, 0.995);
        let twice = deduplicate(once.clone(), 0.995);
        assert_eq!(once.len(), 3);
        assert_eq!(
            once.iter().map(|r| r.source_frame).collect::<Vec<_>>(),
            twice.iter().map(|r| r.source_frame).collect::<Vec<_>>()
        );
    }

    #[test]
    fn single_pause_extraction_in_memory() {
        let f = noise(200, 150, 9).to_rgb();
        let frames = vec![f.clone(); 30];
        let ex = extract_from_source(&frames, &ExtractionParams::default()).unwrap();
        assert_eq!(ex.records.len(), 1);
        assert_eq!(ex.records[0].source_indices, (0, 29));
        assert_eq!(ex.records[0].image, f);
    }

    #[test]
    fn stride_refinement_recovers_exact_bounds() {
        // pause frames at [3, 17] and [23, 40]; travel frames move by 10 px each
        let base = noise(400, 300, 10);
        let mut frames = Vec::new();
        let mut offset = 0i64;
        for i in 0..44usize {
            let still = (3..=17).contains(&i) || (23..=40).contains(&i);
            if i > 0 && !(still && ((3..=17).contains(&(i - 1)) || (23..=40).contains(&(i - 1)))) {
                offset += 10;
            }
            frames.push(shifted(&base, offset % 90, 0));
        }
        for stride in [1usize, 2, 3] {
            let params = ExtractionParams {
                stride,
                min_len: Some(5),
                ..Default::default()
            };
            let ex = extract_from_source(&frames, &params).unwrap();
            let got: Vec<(usize, usize)> = ex.records.iter().map(|r| r.source_indices).collect();
            assert_eq!(got, vec![(3, 17), (23, 40)], "stride {stride}");
        }
    }

    #[test]
    fn inconsistent_dimensions_rejected() {
        let frames = vec![noise(100, 80, 1), noise(100, 80, 1), noise(90, 80, 1)];
        let params = ExtractionParams {
            chunk: 2,
            stride: 1,
            ..Default::default()
        };
        assert!(matches!(
            extract_from_source(&frames, &params),
            Err(Error::InconsistentDimensions { .. })
        ));
    }
}

//! Recursive batch stitching of extracted frames into one mosaic.
//!
//! Level 0 splits the frames into consecutive batches. Inside a batch the
//! first frame is the anchor and every later frame registers against a pool of
//! keypoints gathered from the frames already placed. Each batch becomes a
//! [`MosaicNode`]; nodes are stitched the same way one level up, registering
//! on downscaled node renders, until one node is left. The final mosaic is
//! rendered once from the original frames through the composed transforms.

mod compose;
mod naive;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use compose::{
    feather_weight, render, scaled_extent, BlendMode, GainAccumulator, GainSource, Placement, GAIN_MAX, GAIN_MIN,
};
pub use naive::stitch_naive;

use crate::error::{Error, Result};
use crate::frame_extract::FrameRecord;
use crate::imagecore::{downscale, warped_bounds, ImageBuffer, Mask, Rect, Transform2D, TransformModel};
use crate::par;
use crate::registration::{register, DetectorParams, Features, RansacParams, RegistrationResult, DEFAULT_RATIO};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StitchOrder {
    /// Frames are consumed in capture order.
    #[default]
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StitchPlan {
    pub batch_size: usize,
    pub order: StitchOrder,
    pub blend: BlendMode,
    pub gain_compensation: bool,
    pub model: TransformModel,
    pub max_keypoints: usize,
    pub ratio: f64,
    /// Registrations whose scale departs from 1 by more than this factor are
    /// treated as failed.
    pub max_scale_change: f64,
    pub detector: DetectorParams,
    pub ransac: RansacParams,
}

impl Default for StitchPlan {
    fn default() -> Self {
        Self {
            batch_size: 40,
            order: StitchOrder::Sequential,
            blend: BlendMode::Feather,
            gain_compensation: true,
            model: TransformModel::Similarity,
            max_keypoints: 1000,
            ratio: DEFAULT_RATIO,
            max_scale_change: 1.25,
            detector: DetectorParams::default(),
            ransac: RansacParams::default(),
        }
    }
}

pub const MIN_BATCH: usize = 2;
pub const MAX_BATCH: usize = 200;

impl StitchPlan {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_BATCH..=MAX_BATCH).contains(&self.batch_size) {
            return Err(Error::InvalidParameter(format!(
                "batch_size {} outside [{MIN_BATCH}, {MAX_BATCH}]",
                self.batch_size
            )));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidParameter(format!("ratio {} outside (0, 1]", self.ratio)));
        }
        if self.max_keypoints == 0 {
            return Err(Error::InvalidParameter("max_keypoints must be positive".into()));
        }
        if self.max_scale_change < 1.0 {
            return Err(Error::InvalidParameter("max_scale_change must be >= 1".into()));
        }
        Ok(())
    }
}

/// A frame inside a node: `transform` maps frame pixels into the node canvas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub seq_index: usize,
    pub transform: Transform2D,
    pub gain: f64,
}

#[derive(Clone, Debug)]
pub struct MosaicNode {
    pub image: ImageBuffer,
    /// Pixels covered by at least one frame.
    pub mask: Mask,
    pub members: Vec<Member>,
    /// Canvas rectangle covered by `image`.
    pub bounds: Rect,
    pub level: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Against {
    /// Keypoints pooled from everything already placed in the batch.
    Composite,
    /// The previously placed input alone.
    Previous,
    /// Another single input (all-pairs baseline).
    Pair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationLog {
    pub level: usize,
    /// Input index within the level (frame position at level 0).
    pub input: usize,
    /// Input registered against, for `Previous` and `Pair`.
    pub reference: Option<usize>,
    pub against: Against,
    pub result: Option<RegistrationResult>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelLog {
    pub level: usize,
    pub inputs: usize,
    pub groups: usize,
    pub registrations: Vec<RegistrationLog>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum DropReason {
    /// No geometric consensus with the composite or the previous input.
    NoConsensus(String),
    /// Not connected to the anchor by any successful registration.
    Disconnected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedFrame {
    pub seq_index: usize,
    pub level: usize,
    pub reason: DropReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedFrame {
    pub seq_index: usize,
    /// Frame pixels to mosaic canvas.
    pub transform: Transform2D,
    pub gain: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StitchMethod {
    Recursive,
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Reproducibility record of one stitching run. Wall-clock timings are kept
/// out of the serialized form so identical runs serialize identically; write
/// them separately with [`StitchManifest::timings_json`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchManifest {
    pub method: StitchMethod,
    pub plan: StitchPlan,
    pub frame_count: usize,
    pub registration_calls: usize,
    pub levels: Vec<LevelLog>,
    pub frames: Vec<PlacedFrame>,
    pub dropped: Vec<DroppedFrame>,
    /// Canvas rectangle of the mosaic, in the first placed frame's coordinates.
    pub canvas: Rect,
    #[serde(skip)]
    pub timings: Vec<StageTiming>,
}

impl StitchManifest {
    pub fn timings_json(&self) -> serde_json::Value {
        serde_json::json!({ "stages": self.timings })
    }

    pub fn transform_of(&self, seq_index: usize) -> Option<&Transform2D> {
        self.frames
            .iter()
            .find(|f| f.seq_index == seq_index)
            .map(|f| &f.transform)
    }
}

// --- shared machinery ----------------------------------------------------

/// Something placed at one level: a frame at level 0, a node above.
pub(crate) struct Input {
    /// Full-resolution pixel extent.
    pub dims: (u32, u32),
    /// Input pixels to the input's own canvas.
    pub origin: Transform2D,
    pub members: Vec<Member>,
    /// Keypoints in input pixel coordinates.
    pub features: Features,
    /// Luma for gain estimation; pixel `q` is input pixel `gain_scale * q`.
    pub gain_luma: ImageBuffer,
    pub gain_scale: f64,
    /// Validity at `gain_scale`, for inputs that are not full rectangles.
    pub mask: Option<Mask>,
}

impl Input {
    fn gain_source(&self) -> GainSource<'_> {
        GainSource {
            luma: &self.gain_luma,
            scale: self.gain_scale,
            mask: self.mask.as_ref(),
            dims: self.dims,
        }
    }

    /// True when input pixel `(u, v)` holds image content.
    fn covers(&self, u: f64, v: f64) -> bool {
        let (w, h) = self.dims;
        if u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
            return false;
        }
        match &self.mask {
            None => true,
            Some(m) => {
                let (x, y) = ((u / self.gain_scale).round() as u32, (v / self.gain_scale).round() as u32);
                x < m.width && y < m.height && m.get(x, y)
            }
        }
    }
}

pub(crate) const GAIN_PREVIEW_FACTOR: f64 = 4.0;

pub(crate) fn frame_input(rec: &FrameRecord, plan: &StitchPlan) -> Result<Input> {
    let features = Features::extract(&rec.image, None, &plan.detector, plan.max_keypoints, 1.0)?;
    Ok(Input {
        dims: rec.image.dims(),
        origin: Transform2D::identity(),
        members: vec![Member {
            seq_index: rec.seq_index,
            transform: Transform2D::identity(),
            gain: 1.0,
        }],
        features,
        gain_luma: downscale(&rec.image.to_gray(), GAIN_PREVIEW_FACTOR),
        gain_scale: GAIN_PREVIEW_FACTOR,
        mask: None,
    })
}

/// Registration with call counting and the plan's sanity checks.
pub(crate) struct Registrar<'a> {
    pub plan: &'a StitchPlan,
    /// Keypoint coordinate scale relative to the images features came from.
    pub scale: f64,
    pub calls: usize,
}

impl Registrar<'_> {
    pub fn register(&mut self, a: &Features, b: &Features) -> Result<RegistrationResult> {
        self.calls += 1;
        let mut params = self.plan.ransac;
        params.inlier_threshold *= self.scale;
        let r = register(a, b, self.plan.model, self.plan.ratio, &params)?;
        let s = r.transform.det2().abs().sqrt();
        if !(s <= self.plan.max_scale_change && s >= 1.0 / self.plan.max_scale_change) {
            return Err(Error::NoConsensus {
                inliers: r.inliers,
                min_inliers: params.min_inliers,
            });
        }
        Ok(r)
    }
}

fn is_registration_failure(e: &Error) -> bool {
    matches!(e, Error::NoConsensus { .. } | Error::InsufficientMatches { .. })
}

/// Result of stitching one batch of inputs.
pub(crate) struct BatchOutcome {
    /// `(input index, input pixels -> batch canvas, gain)` in placement order.
    pub placed: Vec<(usize, Transform2D, f64)>,
    pub failed: Vec<(usize, String)>,
    pub logs: Vec<RegistrationLog>,
    pub calls: usize,
}

/// Places `inputs[range]` onto the canvas of its first element.
fn stitch_group(inputs: &[Input], range: std::ops::Range<usize>, level: usize, plan: &StitchPlan, scale: f64) -> Result<BatchOutcome> {
    let mut reg = Registrar { plan, scale, calls: 0 };
    let mut out = BatchOutcome {
        placed: Vec::new(),
        failed: Vec::new(),
        logs: Vec::new(),
        calls: 0,
    };
    let first = range.start;
    let anchor = inputs[first].origin;
    let mut pool = Features::default();
    let mut gains = GainAccumulator::new();
    // placed inputs as (index, placement, inverse placement)
    let mut placed: Vec<(usize, Transform2D, Transform2D)> = Vec::new();

    let admit = |idx: usize, p: Transform2D, pool: &mut Features, placed: &mut Vec<(usize, Transform2D, Transform2D)>| -> Result<()> {
        let inp = &inputs[idx];
        for (kp, d) in inp.features.keypoints.iter().zip(&inp.features.descriptors) {
            let (cx, cy) = p.apply(kp.x, kp.y);
            let seen = placed.iter().any(|(j, _, inv)| {
                let (u, v) = inv.apply(cx, cy);
                inputs[*j].covers(u, v)
            });
            if !seen {
                let mut k = *kp;
                k.x = cx;
                k.y = cy;
                pool.push(k, *d);
            }
        }
        placed.push((idx, p, p.invert()?));
        Ok(())
    };

    admit(first, anchor, &mut pool, &mut placed)?;
    if plan.gain_compensation {
        gains.paint(&inputs[first].gain_source(), &anchor, 1.0)?;
    }
    out.placed.push((first, anchor, 1.0));

    for idx in range.start + 1..range.end {
        let inp = &inputs[idx];
        // composite pool restricted to a window around the last placement
        let (last_idx, last_p, _) = *placed.last().expect("anchor placed");
        let (lw, lh) = inputs[last_idx].dims;
        let margin = (inp.dims.0.max(inp.dims.1) / 2) as i64;
        let window = warped_bounds(&last_p, lw, lh).dilate(margin);
        let mut local = Features::default();
        for (kp, d) in pool.keypoints.iter().zip(&pool.descriptors) {
            if window.contains_point(kp.x, kp.y) {
                local.push(*kp, *d);
            }
        }
        let mut placement = None;
        let mut last_err = String::new();
        match reg.register(&local, &inp.features) {
            Ok(r) => {
                placement = Some(r.transform);
                out.logs.push(log(level, idx, None, Against::Composite, Ok(r)));
            }
            Err(e) if is_registration_failure(&e) => {
                last_err = e.to_string();
                out.logs.push(log(level, idx, None, Against::Composite, Err(&e)));
                match reg.register(&inputs[last_idx].features, &inp.features) {
                    Ok(r) => {
                        placement = Some(last_p.compose(&r.transform));
                        out.logs.push(log(level, idx, Some(last_idx), Against::Previous, Ok(r)));
                    }
                    Err(e) if is_registration_failure(&e) => {
                        last_err = format!("{last_err}; against previous: {e}");
                        out.logs.push(log(level, idx, Some(last_idx), Against::Previous, Err(&e)));
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(e) => return Err(e),
        }
        match placement {
            Some(p) => {
                let gain = if plan.gain_compensation {
                    let g = gains.estimate(&inp.gain_source(), &p)?;
                    gains.paint(&inp.gain_source(), &p, g)?;
                    g
                } else {
                    1.0
                };
                admit(idx, p, &mut pool, &mut placed)?;
                out.placed.push((idx, p, gain));
            }
            None => out.failed.push((idx, last_err)),
        }
    }
    out.calls = reg.calls;
    Ok(out)
}

fn log(level: usize, input: usize, reference: Option<usize>, against: Against, r: std::result::Result<RegistrationResult, &Error>) -> RegistrationLog {
    match r {
        Ok(r) => RegistrationLog {
            level,
            input,
            reference,
            against,
            result: Some(r),
            error: None,
        },
        Err(e) => RegistrationLog {
            level,
            input,
            reference,
            against,
            result: None,
            error: Some(e.to_string()),
        },
    }
}

/// Members of a finished group, expressed in the group's canvas.
fn merge_members(inputs: &[Input], placed: &[(usize, Transform2D, f64)]) -> Result<Vec<Member>> {
    let mut members = Vec::new();
    for (idx, p, gain) in placed {
        let inp = &inputs[*idx];
        let to_own = p.compose(&inp.origin.invert()?);
        for m in &inp.members {
            members.push(Member {
                seq_index: m.seq_index,
                transform: to_own.compose(&m.transform),
                gain: gain * m.gain,
            });
        }
    }
    members.sort_by_key(|m| m.seq_index);
    Ok(members)
}

/// Canvas rectangle covered by `members`.
fn members_bounds(members: &[Member], dims: &dyn Fn(usize) -> (u32, u32)) -> Rect {
    members.iter().fold(Rect::new(0, 0, 0, 0), |acc, m| {
        let (w, h) = dims(m.seq_index);
        acc.union(&warped_bounds(&m.transform, w, h))
    })
}

/// Frame luma downscaled by `factor`, computed once per factor.
struct ScaledFrames<'a> {
    frames: &'a [FrameRecord],
    cache: Vec<(u32, Vec<ImageBuffer>)>,
}

impl<'a> ScaledFrames<'a> {
    fn new(frames: &'a [FrameRecord]) -> Self {
        Self {
            frames,
            cache: Vec::new(),
        }
    }

    fn get(&mut self, factor: u32) -> &[ImageBuffer] {
        if let Some(pos) = self.cache.iter().position(|(f, _)| *f == factor) {
            return &self.cache[pos].1;
        }
        let scaled = par::map(self.frames, |r| downscale(&r.image.to_gray(), factor as f64));
        self.cache.push((factor, scaled));
        &self.cache.last().expect("just pushed").1
    }
}

/// Renders `members` over `bounds` every `step` canvas pixels.
pub(crate) fn render_members(
    frames: &[FrameRecord],
    scaled: Option<&[ImageBuffer]>,
    members: &[Member],
    bounds: Rect,
    step: f64,
    blend: BlendMode,
) -> Result<(ImageBuffer, Mask)> {
    let pos = |seq: usize| frames.iter().position(|f| f.seq_index == seq).expect("member of input");
    let placements: Vec<Placement> = members
        .iter()
        .map(|m| Placement {
            frame: pos(m.seq_index),
            transform: m.transform,
            gain: m.gain,
        })
        .collect();
    let dims: Vec<(u32, u32)> = frames.iter().map(|f| f.image.dims()).collect();
    match scaled {
        Some(s) => render(s, &dims, &placements, bounds, step, blend),
        None => {
            let originals: Vec<&ImageBuffer> = frames.iter().map(|f| &f.image).collect();
            render(&originals, &dims, &placements, bounds, step, blend)
        }
    }
}

/// Group count at each recursion level for `n` frames and batch size `batch`.
pub fn level_group_counts(n: usize, batch: usize) -> Vec<usize> {
    let batch = batch.max(2);
    let mut out = Vec::new();
    let mut inputs = n.max(1);
    loop {
        let groups = inputs.div_ceil(batch);
        out.push(groups);
        if groups == 1 {
            return out;
        }
        inputs = groups;
    }
}

fn check_frames(frames: &[FrameRecord]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut seen: Vec<usize> = frames.iter().map(|f| f.seq_index).collect();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidParameter("duplicate frame seq_index".into()));
    }
    Ok(())
}

// --- public operations ---------------------------------------------------

/// Stitches one batch: the first frame is the anchor at identity.
pub fn stitch_batch(frames: &[FrameRecord], plan: &StitchPlan) -> Result<MosaicNode> {
    plan.validate()?;
    check_frames(frames)?;
    if frames.len() > plan.batch_size {
        return Err(Error::InvalidParameter(format!(
            "{} frames exceed batch_size {}",
            frames.len(),
            plan.batch_size
        )));
    }
    let inputs = par::map(frames, |f| frame_input(f, plan))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let outcome = stitch_group(&inputs, 0..inputs.len(), 0, plan, 1.0)?;
    let members = merge_members(&inputs, &outcome.placed)?;
    let dims = |seq: usize| frames.iter().find(|f| f.seq_index == seq).expect("member").image.dims();
    let bounds = members_bounds(&members, &dims);
    let (image, mask) = render_members(frames, None, &members, bounds, 1.0, plan.blend)?;
    Ok(MosaicNode {
        image,
        mask,
        members,
        bounds,
        level: 0,
    })
}

/// Recursive batch stitching; returns the top node and the run manifest.
pub fn stitch_recursive(frames: &[FrameRecord], plan: &StitchPlan) -> Result<(MosaicNode, StitchManifest)> {
    plan.validate()?;
    check_frames(frames)?;
    let mut timings = Vec::new();
    let clock = Instant::now();
    let mut inputs = par::map(frames, |f| frame_input(f, plan))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    timings.push(StageTiming {
        stage: "features".into(),
        seconds: clock.elapsed().as_secs_f64(),
    });

    let dims_of = |seq: usize| frames.iter().find(|f| f.seq_index == seq).expect("member").image.dims();
    let mut scaled = ScaledFrames::new(frames);
    let mut levels = Vec::new();
    let mut dropped = Vec::new();
    let mut calls = 0;
    let mut level = 0usize;
    let top = loop {
        let clock = Instant::now();
        let scale = (1u32 << level) as f64;
        let n = inputs.len();
        let groups: Vec<std::ops::Range<usize>> = (0..n)
            .step_by(plan.batch_size)
            .map(|s| s..(s + plan.batch_size).min(n))
            .collect();
        let outcomes = par::map(&groups, |g| stitch_group(&inputs, g.clone(), level, plan, scale))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut registrations = Vec::new();
        let mut nodes = Vec::new();
        for o in outcomes {
            calls += o.calls;
            registrations.extend(o.logs);
            for (idx, why) in o.failed {
                for m in &inputs[idx].members {
                    dropped.push(DroppedFrame {
                        seq_index: m.seq_index,
                        level,
                        reason: DropReason::NoConsensus(why.clone()),
                    });
                }
            }
            let members = merge_members(&inputs, &o.placed)?;
            let bounds = members_bounds(&members, &dims_of);
            nodes.push((members, bounds));
        }
        if nodes.is_empty() {
            return Err(Error::StitchFailed(format!("level {level} produced no nodes")));
        }
        levels.push(LevelLog {
            level,
            inputs: n,
            groups: groups.len(),
            registrations,
        });
        timings.push(StageTiming {
            stage: format!("level {level}"),
            seconds: clock.elapsed().as_secs_f64(),
        });
        if nodes.len() == 1 {
            break nodes.pop().expect("one node");
        }

        // next level: nodes become inputs, registered on downscaled renders
        let clock = Instant::now();
        level += 1;
        let factor = 1u32 << level;
        let small = scaled.get(factor);
        let frame_area = frames[0].image.width() as f64 * frames[0].image.height() as f64;
        inputs = par::map(&nodes, |(members, bounds)| -> Result<Input> {
            let (preview, mask) = render_members(frames, Some(small), members, *bounds, factor as f64, plan.blend)?;
            let area = preview.width() as f64 * preview.height() as f64 * (factor * factor) as f64;
            let max_kp = ((plan.max_keypoints as f64) * area / frame_area).ceil() as usize;
            let features = Features::extract(&preview, Some(&mask), &plan.detector, max_kp.clamp(plan.max_keypoints, 20 * plan.max_keypoints), factor as f64)?;
            Ok(Input {
                dims: (bounds.width, bounds.height),
                origin: Transform2D::translation(bounds.x as f64, bounds.y as f64),
                members: members.clone(),
                features,
                gain_luma: preview.to_gray(),
                gain_scale: factor as f64,
                mask: Some(mask),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        timings.push(StageTiming {
            stage: format!("level {level} previews"),
            seconds: clock.elapsed().as_secs_f64(),
        });
    };

    let clock = Instant::now();
    let (members, bounds) = top;
    let (image, mask) = render_members(frames, None, &members, bounds, 1.0, plan.blend)?;
    timings.push(StageTiming {
        stage: "composite".into(),
        seconds: clock.elapsed().as_secs_f64(),
    });
    dropped.sort_by_key(|d| d.seq_index);
    let manifest = StitchManifest {
        method: StitchMethod::Recursive,
        plan: plan.clone(),
        frame_count: frames.len(),
        registration_calls: calls,
        levels,
        frames: members
            .iter()
            .map(|m| PlacedFrame {
                seq_index: m.seq_index,
                transform: m.transform,
                gain: m.gain,
            })
            .collect(),
        dropped,
        canvas: bounds,
        timings,
    };
    Ok((
        MosaicNode {
            image,
            mask,
            members,
            bounds,
            level,
        },
        manifest,
    ))
}

#[cfg(test)]
mod tests;

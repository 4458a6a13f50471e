//! Canvas rendering with feathered blending, and scalar gain estimation.

use serde::{Deserialize, Serialize};

use crate::imagecore::{sample_bilinear, warped_bounds, ImageBuffer, Mask, Rect, Transform2D, TransformModel, BACKGROUND};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// Weighted by distance to the frame border.
    #[default]
    Feather,
    /// Later frames overwrite earlier ones.
    None,
}

/// One frame drawn onto a canvas.
#[derive(Clone, Copy, Debug)]
pub struct Placement {
    /// Index into the frame list handed to [`render`].
    pub frame: usize,
    /// Full-resolution frame pixels to canvas.
    pub transform: Transform2D,
    pub gain: f64,
}

/// Feather weight of full-resolution frame point `(x, y)` in a `w x h` frame.
#[inline]
pub fn feather_weight(x: f64, y: f64, w: f64, h: f64) -> f64 {
    (x + 0.5).min(w - x - 0.5).min(y + 0.5).min(h - y - 0.5)
}

/// Output extent when sampling a canvas rectangle every `step` canvas pixels.
pub fn scaled_extent(bounds: &Rect, step: f64) -> (u32, u32) {
    let w = ((bounds.width.max(1) - 1) as f64 / step).floor() as u32 + 1;
    let h = ((bounds.height.max(1) - 1) as f64 / step).floor() as u32 + 1;
    (w, h)
}

/// Output column range `[i0, i1)` covered by the frame's bounding box.
fn row_span(p: &Prepared, x0: f64, step: f64, width: usize) -> Option<(usize, usize)> {
    let lo = ((p.bbox.x as f64 - x0) / step).ceil().max(0.0);
    let hi = ((p.bbox.right() as f64 - x0) / step).ceil().min(width as f64);
    if hi <= lo {
        return None;
    }
    Some((lo as usize, hi as usize))
}

struct Prepared {
    inv: Transform2D,
    bbox: Rect,
    full: (f64, f64),
    gain: f64,
    frame: usize,
}

/// Renders `placements` over canvas rectangle `bounds`, one output pixel every
/// `step` canvas pixels: output `(i, j)` is canvas `(bounds.x + step*i, bounds.y + step*j)`.
///
/// `frames[k]` is frame `k` downscaled by `step` (see `imagecore::downscale`),
/// `full_dims[k]` its full-resolution extent. Rows render in parallel; the
/// result does not depend on the thread count.
pub fn render<I: std::borrow::Borrow<ImageBuffer> + Sync>(
    frames: &[I],
    full_dims: &[(u32, u32)],
    placements: &[Placement],
    bounds: Rect,
    step: f64,
    blend: BlendMode,
) -> crate::Result<(ImageBuffer, Mask)> {
    let channels = frames.iter().map(|f| f.borrow().channels()).max().unwrap_or(3);
    let prepared = placements
        .iter()
        .map(|p| {
            let (w, h) = full_dims[p.frame];
            Ok(Prepared {
                inv: p.transform.invert()?,
                bbox: warped_bounds(&p.transform, w, h),
                full: (w as f64, h as f64),
                gain: p.gain,
                frame: p.frame,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let (ow, oh) = scaled_extent(&bounds, step);
    let ch = channels as usize;
    let owu = ow as usize;
    let stride = owu * ch;
    let mut data = vec![BACKGROUND; stride * oh as usize];
    let mut valid = vec![false; owu * oh as usize];

    par::for_each_chunk_pair_mut(&mut data, stride, &mut valid, owu, |j, row, row_valid| {
        let cy = bounds.y as f64 + step * j as f64;
        let mut acc = vec![0f32; stride];
        let mut wsum = vec![0f32; owu];
        for p in &prepared {
            if cy < p.bbox.y as f64 || cy >= p.bbox.bottom() as f64 {
                continue;
            }
            let Some((i0, i1)) = row_span(p, bounds.x as f64, step, owu) else {
                continue;
            };
            let img: &ImageBuffer = frames[p.frame].borrow();
            let span = Span {
                p,
                img,
                x0: bounds.x as f64,
                cy,
                step,
                blend,
            };
            match (img.channels() as usize, ch) {
                (1, 1) => span.draw::<1>(i0, i1, &mut acc, &mut wsum),
                (3, 3) => span.draw::<3>(i0, i1, &mut acc, &mut wsum),
                _ => span.draw_generic(i0, i1, ch, &mut acc, &mut wsum),
            }
        }
        for i in 0..owu {
            if wsum[i] > 0.0 {
                let inv = 1.0 / wsum[i];
                for c in 0..ch {
                    // values are non-negative, so this rounds half away from zero
                    row[i * ch + c] = (acc[i * ch + c] * inv + 0.5).min(255.0) as u8;
                }
                row_valid[i] = true;
            }
        }
    });
    Ok((
        ImageBuffer::new(ow, oh, channels, data)?,
        Mask {
            width: ow,
            height: oh,
            data: valid,
        },
    ))
}

const EPS: f64 = 1e-6;

/// One placement intersected with one output row.
struct Span<'a> {
    p: &'a Prepared,
    img: &'a ImageBuffer,
    x0: f64,
    cy: f64,
    step: f64,
    blend: BlendMode,
}

/// Bilinear source position: top-left texel, its neighbours and fractions.
struct Tap {
    i00: usize,
    dx: usize,
    dy: usize,
    ax: f32,
    ay: f32,
    weight: f32,
}

impl Span<'_> {
    #[inline]
    fn frame_point(&self, i: usize, i0: usize, base: (f64, f64), delta: (f64, f64)) -> (f64, f64) {
        if self.p.inv.model == TransformModel::Homography {
            self.p.inv.apply(self.x0 + self.step * i as f64, self.cy)
        } else {
            let k = (i - i0) as f64;
            (base.0 + delta.0 * k, base.1 + delta.1 * k)
        }
    }

    /// Resolves output column `i` to a texel tap, or `None` outside the frame.
    #[inline]
    fn tap(&self, u: f64, v: f64, fc: usize) -> Option<Tap> {
        let (fw, fh) = self.p.full;
        if u < -EPS || v < -EPS || u > fw - 1.0 + EPS || v > fh - 1.0 + EPS {
            return None;
        }
        let u = u.clamp(0.0, fw - 1.0);
        let v = v.clamp(0.0, fh - 1.0);
        let (iw, ih) = (self.img.width() as usize, self.img.height() as usize);
        let (sx, sy) = if self.step == 1.0 {
            (u.min((iw - 1) as f64), v.min((ih - 1) as f64))
        } else {
            ((u / self.step).min((iw - 1) as f64), (v / self.step).min((ih - 1) as f64))
        };
        let (x0, y0) = (sx as usize, sy as usize);
        let weight = match self.blend {
            BlendMode::Feather => feather_weight(u, v, fw, fh) as f32,
            BlendMode::None => 1.0,
        };
        Some(Tap {
            i00: (y0 * iw + x0) * fc,
            dx: if x0 + 1 < iw { fc } else { 0 },
            dy: if y0 + 1 < ih { iw * fc } else { 0 },
            ax: (sx - x0 as f64) as f32,
            ay: (sy - y0 as f64) as f32,
            weight,
        })
    }

    fn setup(&self, i0: usize) -> ((f64, f64), (f64, f64)) {
        let base = self.p.inv.apply(self.x0 + self.step * i0 as f64, self.cy);
        let m = &self.p.inv.m;
        (base, (m[0][0] * self.step, m[1][0] * self.step))
    }

    #[inline]
    fn accumulate(&self, tap: &Tap, val: f32, slot: &mut f32) {
        let val = val * self.p.gain as f32;
        if self.blend == BlendMode::None {
            *slot = val;
        } else {
            *slot += tap.weight * val;
        }
    }

    fn draw<const CH: usize>(&self, i0: usize, i1: usize, acc: &mut [f32], wsum: &mut [f32]) {
        let d = self.img.data();
        let (base, delta) = self.setup(i0);
        for i in i0..i1 {
            let (u, v) = self.frame_point(i, i0, base, delta);
            let Some(t) = self.tap(u, v, CH) else { continue };
            if self.blend == BlendMode::None {
                wsum[i] = 0.0;
            }
            let q00 = &d[t.i00..t.i00 + CH];
            let q10 = &d[t.i00 + t.dx..t.i00 + t.dx + CH];
            let q01 = &d[t.i00 + t.dy..t.i00 + t.dy + CH];
            let q11 = &d[t.i00 + t.dx + t.dy..t.i00 + t.dx + t.dy + CH];
            let out = &mut acc[i * CH..(i + 1) * CH];
            for c in 0..CH {
                let (p00, p10) = (q00[c] as f32, q10[c] as f32);
                let (p01, p11) = (q01[c] as f32, q11[c] as f32);
                let top = p00 + (p10 - p00) * t.ax;
                let bot = p01 + (p11 - p01) * t.ax;
                self.accumulate(&t, top + (bot - top) * t.ay, &mut out[c]);
            }
            wsum[i] += t.weight;
        }
    }

    fn draw_generic(&self, i0: usize, i1: usize, ch: usize, acc: &mut [f32], wsum: &mut [f32]) {
        let d = self.img.data();
        let fc = self.img.channels() as usize;
        let (base, delta) = self.setup(i0);
        for i in i0..i1 {
            let (u, v) = self.frame_point(i, i0, base, delta);
            let Some(t) = self.tap(u, v, fc) else { continue };
            if self.blend == BlendMode::None {
                wsum[i] = 0.0;
            }
            for c in 0..ch {
                let k = t.i00 + c.min(fc - 1);
                let (p00, p10) = (d[k] as f32, d[k + t.dx] as f32);
                let (p01, p11) = (d[k + t.dy] as f32, d[k + t.dx + t.dy] as f32);
                let top = p00 + (p10 - p00) * t.ax;
                let bot = p01 + (p11 - p01) * t.ax;
                self.accumulate(&t, top + (bot - top) * t.ay, &mut acc[i * ch + c]);
            }
            wsum[i] += t.weight;
        }
    }
}

pub const GAIN_MIN: f64 = 0.7;
pub const GAIN_MAX: f64 = 1.4;
/// Canvas pixels per accumulator cell along each axis.
pub const GAIN_CELL: f64 = 4.0;
const MIN_OVERLAP_CELLS: usize = 16;
/// Samples darker than this are too noisy for a ratio.
const MIN_LUMA: f64 = 8.0;

/// Low-resolution luma of an input, for gain estimation.
pub struct GainSource<'a> {
    /// Luma plane; pixel `q` sits at input pixel `scale * q`.
    pub luma: &'a ImageBuffer,
    pub scale: f64,
    pub mask: Option<&'a Mask>,
    /// Full-resolution extent.
    pub dims: (u32, u32),
}

impl GainSource<'_> {
    fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let (w, h) = self.dims;
        if u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
            return None;
        }
        let (qx, qy) = (u / self.scale, v / self.scale);
        if let Some(m) = self.mask {
            let (mx, my) = (qx.round() as u32, qy.round() as u32);
            if mx >= m.width || my >= m.height || !m.get(mx, my) {
                return None;
            }
        }
        let qx = qx.min((self.luma.width() - 1) as f64);
        let qy = qy.min((self.luma.height() - 1) as f64);
        sample_bilinear(self.luma, qx, qy, 0)
    }
}

/// Running low-resolution luma composite used to pick scalar gains in
/// placement order.
pub struct GainAccumulator {
    origin: (i64, i64),
    width: usize,
    height: usize,
    /// NaN marks cells nothing has been painted into.
    cells: Vec<f32>,
}

impl Default for GainAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl GainAccumulator {
    pub fn new() -> Self {
        Self {
            origin: (0, 0),
            width: 0,
            height: 0,
            cells: Vec::new(),
        }
    }

    fn cell_range(bbox: &Rect) -> (i64, i64, i64, i64) {
        let x0 = (bbox.x as f64 / GAIN_CELL).floor() as i64;
        let y0 = (bbox.y as f64 / GAIN_CELL).floor() as i64;
        let x1 = ((bbox.right() - 1) as f64 / GAIN_CELL).ceil() as i64;
        let y1 = ((bbox.bottom() - 1) as f64 / GAIN_CELL).ceil() as i64;
        (x0, y0, x1, y1)
    }

    fn ensure(&mut self, x0: i64, y0: i64, x1: i64, y1: i64) {
        if self.width > 0 {
            let (ox, oy) = self.origin;
            if x0 >= ox && y0 >= oy && x1 < ox + self.width as i64 && y1 < oy + self.height as i64 {
                return;
            }
        }
        let (nx0, ny0, nx1, ny1) = if self.width == 0 {
            (x0, y0, x1, y1)
        } else {
            (
                x0.min(self.origin.0),
                y0.min(self.origin.1),
                x1.max(self.origin.0 + self.width as i64 - 1),
                y1.max(self.origin.1 + self.height as i64 - 1),
            )
        };
        let nw = (nx1 - nx0 + 1) as usize;
        let nh = (ny1 - ny0 + 1) as usize;
        let mut cells = vec![f32::NAN; nw * nh];
        for y in 0..self.height {
            let dy = (self.origin.1 - ny0) as usize + y;
            let dx = (self.origin.0 - nx0) as usize;
            cells[dy * nw + dx..dy * nw + dx + self.width]
                .copy_from_slice(&self.cells[y * self.width..(y + 1) * self.width]);
        }
        self.origin = (nx0, ny0);
        self.width = nw;
        self.height = nh;
        self.cells = cells;
    }

    /// Median of composite / incoming over the overlap, clamped to
    /// `[GAIN_MIN, GAIN_MAX]`; 1 when the overlap is too small.
    pub fn estimate(&self, src: &GainSource, placement: &Transform2D) -> crate::Result<f64> {
        let inv = placement.invert()?;
        let bbox = warped_bounds(placement, src.dims.0, src.dims.1);
        let (x0, y0, x1, y1) = Self::cell_range(&bbox);
        let mut ratios = Vec::new();
        for cy in y0.max(self.origin.1)..=y1.min(self.origin.1 + self.height as i64 - 1) {
            for cx in x0.max(self.origin.0)..=x1.min(self.origin.0 + self.width as i64 - 1) {
                let have = self.cells[((cy - self.origin.1) as usize) * self.width + (cx - self.origin.0) as usize];
                if have.is_nan() {
                    continue;
                }
                let (u, v) = inv.apply(cx as f64 * GAIN_CELL, cy as f64 * GAIN_CELL);
                if let Some(incoming) = src.sample(u, v) {
                    if incoming >= MIN_LUMA && have as f64 >= MIN_LUMA {
                        ratios.push(have as f64 / incoming);
                    }
                }
            }
        }
        if ratios.len() < MIN_OVERLAP_CELLS {
            return Ok(1.0);
        }
        let mid = ratios.len() / 2;
        let (_, m, _) = ratios.select_nth_unstable_by(mid, f64::total_cmp);
        Ok(m.clamp(GAIN_MIN, GAIN_MAX))
    }

    /// Paints `gain * incoming` into cells nothing has covered yet.
    pub fn paint(&mut self, src: &GainSource, placement: &Transform2D, gain: f64) -> crate::Result<()> {
        let inv = placement.invert()?;
        let bbox = warped_bounds(placement, src.dims.0, src.dims.1);
        let (x0, y0, x1, y1) = Self::cell_range(&bbox);
        self.ensure(x0, y0, x1, y1);
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                let idx = ((cy - self.origin.1) as usize) * self.width + (cx - self.origin.0) as usize;
                if !self.cells[idx].is_nan() {
                    continue;
                }
                let (u, v) = inv.apply(cx as f64 * GAIN_CELL, cy as f64 * GAIN_CELL);
                if let Some(incoming) = src.sample(u, v) {
                    self.cells[idx] = (incoming * gain) as f32;
                }
            }
        }
        Ok(())
    }
}

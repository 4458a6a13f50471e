use serde::{Deserialize, Serialize};

use super::buffer::{ImageBuffer, Mask, Rect, BACKGROUND};
use super::transform::Transform2D;
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Nearest,
    #[default]
    Bilinear,
}

/// Warped raster plus the mask of output pixels that received source data.
#[derive(Clone, Debug)]
pub struct Warped {
    pub image: ImageBuffer,
    pub mask: Mask,
}

/// Samples channel `c` at a real-valued position. Pixel centers sit on integers.
/// Returns `None` outside `[0, w-1] x [0, h-1]`.
#[inline]
pub fn sample_bilinear(img: &ImageBuffer, x: f64, y: f64, c: u8) -> Option<f64> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
        return None;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as u32;
    let y0 = y0 as u32;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let p00 = img.get(x0, y0, c) as f64;
    let p10 = img.get(x1, y0, c) as f64;
    let p01 = img.get(x0, y1, c) as f64;
    let p11 = img.get(x1, y1, c) as f64;
    let top = p00 + (p10 - p00) * fx;
    let bot = p01 + (p11 - p01) * fx;
    Some(top + (bot - top) * fy)
}

#[inline]
fn sample_nearest(img: &ImageBuffer, x: f64, y: f64, c: u8) -> Option<f64> {
    let xi = (x + 0.5).floor();
    let yi = (y + 0.5).floor();
    if xi < 0.0 || yi < 0.0 || xi >= img.width() as f64 || yi >= img.height() as f64 {
        return None;
    }
    Some(img.get(xi as u32, yi as u32, c) as f64)
}

/// Resamples `src` onto the canvas rectangle `out_bounds`. Output pixel `(i, j)`
/// corresponds to canvas point `(out_bounds.x + i, out_bounds.y + j)` and is read
/// from `src` at `t⁻¹` of that point. Unmapped pixels are white and masked out.
pub fn warp(src: &ImageBuffer, t: &Transform2D, out_bounds: Rect, interp: Interp) -> Result<Warped> {
    if out_bounds.is_empty() {
        return Err(Error::InvalidParameter("empty warp bounds".into()));
    }
    let inv = t.invert()?;
    let (ow, oh) = (out_bounds.width as usize, out_bounds.height as usize);
    let ch = src.channels() as usize;
    let mut data = vec![BACKGROUND; ow * oh * ch];
    let mut valid = vec![false; ow * oh];
    let rows = par::map_range(oh, |j| {
        let mut row = vec![BACKGROUND; ow * ch];
        let mut row_valid = vec![false; ow];
        let cy = (out_bounds.y + j as i64) as f64;
        for i in 0..ow {
            let cx = (out_bounds.x + i as i64) as f64;
            let (sx, sy) = inv.apply(cx, cy);
            for c in 0..ch {
                let v = match interp {
                    Interp::Bilinear => sample_bilinear(src, sx, sy, c as u8),
                    Interp::Nearest => sample_nearest(src, sx, sy, c as u8),
                };
                match v {
                    Some(v) => {
                        row[i * ch + c] = v.round().clamp(0.0, 255.0) as u8;
                        row_valid[i] = true;
                    }
                    None => break,
                }
            }
        }
        (row, row_valid)
    });
    for (j, (row, row_valid)) in rows.into_iter().enumerate() {
        data[j * ow * ch..(j + 1) * ow * ch].copy_from_slice(&row);
        valid[j * ow..(j + 1) * ow].copy_from_slice(&row_valid);
    }
    Ok(Warped {
        image: ImageBuffer::new(out_bounds.width, out_bounds.height, src.channels(), data)?,
        mask: Mask {
            width: out_bounds.width,
            height: out_bounds.height,
            data: valid,
        },
    })
}

/// Canvas rectangle covering `t` applied to every pixel center of a `w x h` image.
pub fn warped_bounds(t: &Transform2D, w: u32, h: u32) -> Rect {
    Rect::bounding(&t.map_corners(w, h))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> ImageBuffer {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k: Vec<f32> = gaussian_kernel(sigma).iter().map(|&v| v as f32).collect();
    let r = k.len() / 2;
    let (w, h, ch) = (img.width() as usize, img.height() as usize, img.channels() as usize);
    let stride = w * ch;
    let src = img.data();
    let mut tmp = vec![0f32; src.len()];
    par::for_each_chunk_mut(&mut tmp, stride, |y, row| {
        // clamp-to-edge padded copy of the source row
        let line = &src[y * stride..(y + 1) * stride];
        let mut padded = vec![0f32; (w + 2 * r) * ch];
        for (px, chunk) in padded.chunks_exact_mut(ch).enumerate() {
            let sx = px.saturating_sub(r).min(w - 1);
            for c in 0..ch {
                chunk[c] = line[sx * ch + c] as f32;
            }
        }
        for (ki, &kv) in k.iter().enumerate() {
            let shifted = &padded[ki * ch..ki * ch + stride];
            for (o, &v) in row.iter_mut().zip(shifted) {
                *o += kv * v;
            }
        }
    });
    let mut out = vec![0u8; src.len()];
    par::for_each_chunk_mut(&mut out, stride, |y, row| {
        let mut acc = vec![0f32; stride];
        for (ki, &kv) in k.iter().enumerate() {
            let yy = (y + ki).saturating_sub(r).min(h - 1);
            for (a, &v) in acc.iter_mut().zip(&tmp[yy * stride..(yy + 1) * stride]) {
                *a += kv * v;
            }
        }
        for (o, a) in row.iter_mut().zip(acc) {
            *o = a.round().clamp(0.0, 255.0) as u8;
        }
    });
    ImageBuffer::new(img.width(), img.height(), img.channels(), out).expect("same extent")
}

/// Shift-free downscale: low-pass, then sample at `factor * p`. Output pixel `p`
/// corresponds exactly to input point `factor * p`, i.e. the image warped by
/// `scale(1 / factor)`.
pub fn downscale(img: &ImageBuffer, factor: f64) -> ImageBuffer {
    assert!(factor >= 1.0, "downscale factor must be >= 1");
    if factor == 1.0 {
        return img.clone();
    }
    let blurred = gaussian_blur(img, 0.5 * factor);
    let w = (((img.width() - 1) as f64 / factor).floor() as u32 + 1).max(1);
    let h = (((img.height() - 1) as f64 / factor).floor() as u32 + 1).max(1);
    let ch = img.channels();
    let mut data = vec![0u8; w as usize * h as usize * ch as usize];
    par::for_each_chunk_mut(&mut data, w as usize * ch as usize, |y, row| {
        for x in 0..w as usize {
            for c in 0..ch {
                let v = sample_bilinear(&blurred, x as f64 * factor, y as f64 * factor, c)
                    .unwrap_or(BACKGROUND as f64);
                row[x * ch as usize + c as usize] = v.round() as u8;
            }
        }
    });
    ImageBuffer::new(w, h, ch, data).expect("positive extent")
}

/// Nearest-sampled mask matching [`downscale`]'s geometry.
pub fn downscale_mask(mask: &Mask, factor: f64) -> Mask {
    let w = (((mask.width - 1) as f64 / factor).floor() as u32 + 1).max(1);
    let h = (((mask.height - 1) as f64 / factor).floor() as u32 + 1).max(1);
    let mut data = Vec::with_capacity(w as usize * h as usize);
    for y in 0..h {
        for x in 0..w {
            let sx = ((x as f64 * factor).round() as u32).min(mask.width - 1);
            let sy = ((y as f64 * factor).round() as u32).min(mask.height - 1);
            data.push(mask.get(sx, sy));
        }
    }
    Mask {
        width: w,
        height: h,
        data,
    }
}

/// Upscales by an integer factor via bilinear sampling at `p / factor`
/// (equivalent to warping by `scale(factor)`).
pub fn upscale(img: &ImageBuffer, factor: u32) -> ImageBuffer {
    let (w, h) = (img.width() * factor, img.height() * factor);
    let ch = img.channels();
    let f = factor as f64;
    let mut data = vec![0u8; w as usize * h as usize * ch as usize];
    par::for_each_chunk_mut(&mut data, w as usize * ch as usize, |y, row| {
        let sy = (y as f64 / f).min((img.height() - 1) as f64);
        for x in 0..w as usize {
            let sx = (x as f64 / f).min((img.width() - 1) as f64);
            for c in 0..ch {
                let v = sample_bilinear(img, sx, sy, c).expect("clamped inside");
                row[x * ch as usize + c as usize] = v.round() as u8;
            }
        }
    });
    ImageBuffer::new(w, h, ch, data).expect("positive extent")
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Background value written wherever no source data exists.
pub const BACKGROUND: u8 = 255;

/// Owned 8-bit raster, row-major, interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty extent {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("{channels} channels")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(Error::InvalidImage(format!(
                "data length {} != {expected}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// An image with every sample set to `value`.
    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Self {
        let n = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; n]).expect("valid extent")
    }

    pub fn from_gray_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> u8) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, 1, data).expect("valid extent")
    }

    pub fn from_rgb_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, 3, data).expect("valid extent")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn is_gray(&self) -> bool {
        self.channels == 1
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u8) -> u8 {
        self.data[(y as usize * self.width as usize + x as usize) * self.channels as usize
            + c as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: u8, v: u8) {
        let i = (y as usize * self.width as usize + x as usize) * self.channels as usize
            + c as usize;
        self.data[i] = v;
    }

    /// Row `y` as a slice of `width * channels` samples.
    pub fn row(&self, y: u32) -> &[u8] {
        let stride = self.width as usize * self.channels as usize;
        &self.data[y as usize * stride..(y as usize + 1) * stride]
    }

    /// Luma conversion with BT.601 weights. Gray images are returned as-is.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]))
            .collect();
        ImageBuffer::new(self.width, self.height, 1, data).expect("same extent")
    }

    /// Replicates a gray image into three channels.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer::new(self.width, self.height, 3, data).expect("same extent")
    }

    /// Copies the sub-rectangle starting at `(x, y)`. The rectangle must lie inside the image.
    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> Result<ImageBuffer> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::InvalidParameter(format!(
                "crop {x},{y} {w}x{h} outside {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels as usize;
        let mut data = Vec::with_capacity(w as usize * h as usize * c);
        for yy in y..y + h {
            let row = self.row(yy);
            data.extend_from_slice(&row[x as usize * c..(x + w) as usize * c]);
        }
        ImageBuffer::new(w, h, self.channels, data)
    }

    /// Saturating per-sample offset.
    pub fn offset(&self, delta: i32) -> ImageBuffer {
        let data = self
            .data
            .iter()
            .map(|&v| (v as i32 + delta).clamp(0, 255) as u8)
            .collect();
        ImageBuffer::new(self.width, self.height, self.channels, data).expect("same extent")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ImageBuffer> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Codec {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(img))
    }

    pub fn from_dynamic(img: image::DynamicImage) -> ImageBuffer {
        use image::DynamicImage;
        match img {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                ImageBuffer::new(w, h, 1, g.into_raw()).expect("decoder extent")
            }
            other => {
                let rgb = other.into_rgb8();
                let (w, h) = rgb.dimensions();
                ImageBuffer::new(w, h, 3, rgb.into_raw()).expect("decoder extent")
            }
        }
    }

    /// Writes PNG or JPEG (quality 90) depending on the file extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("jpg") | Some("jpeg") => self.encode_jpeg(90),
            _ => self.encode_png(),
        }
        .map_err(|source| Error::Codec {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, image::ImageError> {
        use image::ImageEncoder;
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out).write_image(
            &self.data,
            self.width,
            self.height,
            self.color_type(),
        )?;
        Ok(out)
    }

    pub fn encode_jpeg(&self, quality: u8) -> Result<Vec<u8>, image::ImageError> {
        use image::ImageEncoder;
        let mut out = Vec::new();
        image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality).write_image(
            &self.data,
            self.width,
            self.height,
            self.color_type(),
        )?;
        Ok(out)
    }

    fn color_type(&self) -> image::ExtendedColorType {
        if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        }
    }
}

#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
        .round()
        .clamp(0.0, 255.0) as u8
}

/// Per-pixel validity, same extent as the image it accompanies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn full(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Valid wherever the image is not pure background.
    pub fn from_non_background(img: &ImageBuffer) -> Mask {
        let c = img.channels() as usize;
        let data = img
            .data()
            .chunks_exact(c)
            .map(|p| p.iter().any(|&v| v != BACKGROUND))
            .collect();
        Mask {
            width: img.width(),
            height: img.height(),
            data,
        }
    }

    /// Shrinks the valid region by `radius` pixels (square structuring element).
    pub fn erode(&self, radius: u32) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width as usize, self.height as usize);
        let r = radius as usize;
        // separable min filter; out-of-image counts as invalid
        let mut tmp = vec![false; w * h];
        for y in 0..h {
            let mut run = 0usize;
            let mut ok_from = vec![false; w];
            for (x, ok) in ok_from.iter_mut().enumerate() {
                run = if self.data[y * w + x] { run + 1 } else { 0 };
                *ok = run > 2 * r;
            }
            for x in 0..w {
                let end = x + r;
                tmp[y * w + x] = x >= r && end < w && ok_from[end];
            }
        }
        let mut out = vec![false; w * h];
        for x in 0..w {
            let mut run = 0usize;
            let mut ok_from = vec![false; h];
            for (y, ok) in ok_from.iter_mut().enumerate() {
                run = if tmp[y * w + x] { run + 1 } else { 0 };
                *ok = run > 2 * r;
            }
            for y in 0..h {
                let end = y + r;
                out[y * w + x] = y >= r && end < h && ok_from[end];
            }
        }
        Mask {
            width: self.width,
            height: self.height,
            data: out,
        }
    }
}

/// Integer rectangle; `x`,`y` may be negative (canvas coordinates).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn new(x: i64, y: i64, width: u32, height: u32) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    pub fn of_image(img: &ImageBuffer) -> Self {
        Self::new(0, 0, img.width(), img.height())
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn right(&self) -> i64 {
        self.x + self.width as i64
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.height as i64
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn union(&self, other: &Rect) -> Rect {
        if self.is_empty() {
            return *other;
        }
        if other.is_empty() {
            return *self;
        }
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        let r = self.right().max(other.right());
        let b = self.bottom().max(other.bottom());
        Rect::new(x, y, (r - x) as u32, (b - y) as u32)
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let x = self.x.max(other.x);
        let y = self.y.max(other.y);
        let r = self.right().min(other.right());
        let b = self.bottom().min(other.bottom());
        (r > x && b > y).then(|| Rect::new(x, y, (r - x) as u32, (b - y) as u32))
    }

    /// Grows the rectangle by `d` on every side.
    pub fn dilate(&self, d: i64) -> Rect {
        Rect::new(
            self.x - d,
            self.y - d,
            (self.width as i64 + 2 * d).max(0) as u32,
            (self.height as i64 + 2 * d).max(0) as u32,
        )
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x as f64 && y >= self.y as f64 && x < self.right() as f64 && y < self.bottom() as f64
    }

    /// Smallest integer rectangle covering the pixel centers spanned by `pts`,
    /// tolerating 1e-6 of floating-point overshoot.
    pub fn bounding(pts: &[(f64, f64)]) -> Rect {
        let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_x = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let max_y = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (min_x + 1e-6).floor() as i64;
        let y0 = (min_y + 1e-6).floor() as i64;
        let x1 = (max_x - 1e-6).ceil() as i64;
        let y1 = (max_y - 1e-6).ceil() as i64;
        Rect::new(x0, y0, (x1 - x0 + 1) as u32, (y1 - y0 + 1) as u32)
    }
}

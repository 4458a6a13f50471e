//! Multi-resolution tile pyramid on disk, deep-zoom style: a JSON descriptor
//! plus `{level}/{col}_{row}.{ext}` tiles. Level 0 is at most 2x2 pixels; the
//! last level is the full image.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::ImageBuffer;
use crate::par;

pub const DESCRIPTOR_FILE: &str = "pyramid.json";
pub const PYRAMID_KIND: &str = "slidestitch-pyramid";
pub const JPEG_QUALITY: u8 = 90;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileFormat {
    #[default]
    Png,
    Jpeg,
}

impl TileFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TileFormat::Png => "png",
            TileFormat::Jpeg => "jpg",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidParams {
    pub tile_size: u32,
    pub format: TileFormat,
}

impl Default for PyramidParams {
    fn default() -> Self {
        Self {
            tile_size: 256,
            format: TileFormat::Png,
        }
    }
}

/// The descriptor, serialized as `pyramid.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilePyramid {
    pub kind: String,
    pub format_version: u32,
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub tile_size: u32,
    pub overlap: u32,
    pub format: TileFormat,
    pub levels: u32,
    /// `[width, height]` per level, smallest first.
    pub level_dims: Vec<[u32; 2]>,
    /// `[columns, rows]` per level.
    pub level_tiles: Vec<[u32; 2]>,
    pub tile_path: String,
}

/// `floor(log2(max(w, h))) + 1`.
pub fn level_count(width: u32, height: u32) -> u32 {
    32 - width.max(height).max(1).leading_zeros()
}

/// Extent of `level` for a base image of `width x height`.
pub fn level_dims(width: u32, height: u32, level: u32) -> (u32, u32) {
    let shift = level_count(width, height) - 1 - level;
    (width.div_ceil(1 << shift), height.div_ceil(1 << shift))
}

/// Halves an image with a 2x2 box filter; odd trailing rows and columns
/// average the pixels that exist. Rounds half up.
pub fn downsample_box2(img: &ImageBuffer) -> ImageBuffer {
    let (w, h) = img.dims();
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let ch = img.channels() as usize;
    let src = img.data();
    let (wu, hu) = (w as usize, h as usize);
    let mut data = vec![0u8; ow as usize * oh as usize * ch];
    par::for_each_chunk_mut(&mut data, ow as usize * ch, |y, row| {
        let ys: &[usize] = if 2 * y + 1 < hu { &[2 * y, 2 * y + 1] } else { &[2 * y] };
        for x in 0..ow as usize {
            let xs: &[usize] = if 2 * x + 1 < wu { &[2 * x, 2 * x + 1] } else { &[2 * x] };
            let n = (xs.len() * ys.len()) as u32;
            for c in 0..ch {
                let mut sum = 0u32;
                for &yy in ys {
                    for &xx in xs {
                        sum += src[(yy * wu + xx) * ch + c] as u32;
                    }
                }
                row[x * ch + c] = ((sum + n / 2) / n) as u8;
            }
        }
    });
    ImageBuffer::new(ow, oh, img.channels(), data).expect("positive extent")
}

impl TilePyramid {
    fn describe(img: &ImageBuffer, params: &PyramidParams) -> TilePyramid {
        let (w, h) = img.dims();
        let levels = level_count(w, h);
        let level_dims: Vec<[u32; 2]> = (0..levels)
            .map(|l| {
                let (lw, lh) = level_dims(w, h, l);
                [lw, lh]
            })
            .collect();
        let level_tiles = level_dims
            .iter()
            .map(|d| [d[0].div_ceil(params.tile_size), d[1].div_ceil(params.tile_size)])
            .collect();
        TilePyramid {
            kind: PYRAMID_KIND.into(),
            format_version: 1,
            width: w,
            height: h,
            channels: img.channels(),
            tile_size: params.tile_size,
            overlap: 0,
            format: params.format,
            levels,
            level_dims,
            level_tiles,
            tile_path: format!("{{level}}/{{col}}_{{row}}.{}", params.format.extension()),
        }
    }

    /// Path of one tile relative to the pyramid root.
    pub fn tile_relpath(&self, level: u32, col: u32, row: u32) -> PathBuf {
        PathBuf::from(
            self.tile_path
                .replace("{level}", &level.to_string())
                .replace("{col}", &col.to_string())
                .replace("{row}", &row.to_string()),
        )
    }

    pub fn tile_count(&self) -> u64 {
        self.level_tiles.iter().map(|t| t[0] as u64 * t[1] as u64).sum()
    }

    pub fn load(root: impl AsRef<Path>) -> Result<TilePyramid> {
        let path = root.as_ref().join(DESCRIPTOR_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let p: TilePyramid = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let expected = TilePyramid::describe(
            &ImageBuffer::filled(p.width.max(1), p.height.max(1), p.channels.max(1), 0),
            &PyramidParams {
                tile_size: p.tile_size.max(1),
                format: p.format,
            },
        );
        if p.kind != PYRAMID_KIND || p.overlap != 0 || p != expected {
            return Err(Error::CorruptPyramid(format!("{} is inconsistent", path.display())));
        }
        Ok(p)
    }
}

fn encode(img: &ImageBuffer, format: TileFormat, path: &Path) -> Result<()> {
    let bytes = match format {
        TileFormat::Png => img.encode_png(),
        TileFormat::Jpeg => img.encode_jpeg(JPEG_QUALITY),
    }
    .map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes every level of `img` under `root`; the descriptor goes last, so a
/// directory with a descriptor always holds a complete pyramid.
pub fn build_pyramid(img: &ImageBuffer, root: impl AsRef<Path>, params: &PyramidParams) -> Result<TilePyramid> {
    let root = root.as_ref();
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::EmptyInput);
    }
    if params.tile_size < 2 {
        return Err(Error::InvalidParameter(format!("tile_size {} < 2", params.tile_size)));
    }
    let pyramid = TilePyramid::describe(img, params);
    let descriptor = root.join(DESCRIPTOR_FILE);
    match fs::remove_file(&descriptor) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(Error::io(&descriptor, e)),
        _ => {}
    }
    let ts = params.tile_size;
    let mut level_img = img.clone();
    for level in (0..pyramid.levels).rev() {
        let dir = root.join(level.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let [cols, rows] = pyramid.level_tiles[level as usize];
        let cells: Vec<(u32, u32)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (c, r))).collect();
        let current = &level_img;
        par::map(&cells, |&(c, r)| {
            let (x, y) = (c * ts, r * ts);
            let tile = current.crop(x, y, ts.min(current.width() - x), ts.min(current.height() - y))?;
            encode(&tile, params.format, &root.join(pyramid.tile_relpath(level, c, r)))
        })
        .into_iter()
        .collect::<Result<()>>()?;
        if level > 0 {
            level_img = downsample_box2(&level_img);
        }
    }
    let text = serde_json::to_string_pretty(&pyramid).map_err(|e| Error::json(&descriptor, e))? + "\n";
    fs::write(&descriptor, text).map_err(|e| Error::io(&descriptor, e))?;
    Ok(pyramid)
}

/// Stitches the tiles of `level` back into one image.
pub fn reassemble(root: impl AsRef<Path>, level: u32) -> Result<ImageBuffer> {
    let root = root.as_ref();
    let p = TilePyramid::load(root)?;
    if level >= p.levels {
        return Err(Error::InvalidParameter(format!("level {level} >= {}", p.levels)));
    }
    let [w, h] = p.level_dims[level as usize];
    let [cols, rows] = p.level_tiles[level as usize];
    let ch = p.channels as usize;
    let ts = p.tile_size;
    let mut out = ImageBuffer::filled(w, h, p.channels, 0);
    for r in 0..rows {
        for c in 0..cols {
            let rel = p.tile_relpath(level, c, r);
            let path = root.join(&rel);
            if !path.is_file() {
                return Err(Error::CorruptPyramid(format!("missing tile {}", rel.display())));
            }
            let tile = ImageBuffer::load(&path)?;
            let (x, y) = (c * ts, r * ts);
            let want = (ts.min(w - x), ts.min(h - y));
            if tile.dims() != want || tile.channels() != p.channels {
                return Err(Error::CorruptPyramid(format!(
                    "tile {} is {}x{}x{}, expected {}x{}x{}",
                    rel.display(),
                    tile.width(),
                    tile.height(),
                    tile.channels(),
                    want.0,
                    want.1,
                    ch
                )));
            }
            let tw = want.0 as usize * ch;
            for ty in 0..want.1 {
                let dst = ((y + ty) as usize * w as usize + x as usize) * ch;
                out.data_mut()[dst..dst + tw].copy_from_slice(tile.row(ty));
            }
        }
    }
    Ok(out)
}

/// Outcome of [`verify`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verification {
    pub levels: u32,
    pub tiles: u64,
    /// Whether the base level equals the supplied source image.
    pub base_matches_source: Option<bool>,
}

/// Reassembles every level and checks each against a box downsample of the
/// level above; PNG pyramids must match exactly. With `source`, the base level
/// must also equal it byte for byte.
pub fn verify(root: impl AsRef<Path>, source: Option<&ImageBuffer>) -> Result<Verification> {
    let root = root.as_ref();
    let p = TilePyramid::load(root)?;
    let mut above = reassemble(root, p.levels - 1)?;
    let base_matches_source = source.map(|s| *s == above);
    if base_matches_source == Some(false) {
        return Err(Error::CorruptPyramid("base level differs from the source image".into()));
    }
    for level in (0..p.levels - 1).rev() {
        let img = reassemble(root, level)?;
        if p.format == TileFormat::Png && img != downsample_box2(&above) {
            return Err(Error::CorruptPyramid(format!(
                "level {level} is not the downsample of level {}",
                level + 1
            )));
        }
        above = img;
    }
    Ok(Verification {
        levels: p.levels,
        tiles: p.tile_count(),
        base_matches_source,
    })
}

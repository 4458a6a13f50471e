//! SSIM and PSNR, with mean ± std aggregation and report rendering.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::ImageBuffer;
use crate::par;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const DYNAMIC_RANGE: f64 = 255.0;
/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    Ok(())
}

/// Unrounded Rec. 601 luma.
fn luma_plane(img: &ImageBuffer) -> Vec<f64> {
    match img.channels() {
        1 => img.data().iter().map(|&v| v as f64).collect(),
        c => img
            .data()
            .chunks_exact(c as usize)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect(),
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable weighted sum over every full window position ("valid" filtering).
fn filter_valid(p: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &p[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luma planes, over all window positions
/// that fit inside the image.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = a.dims();
    let min = SSIM_WINDOW as u32;
    if w < min || h < min {
        return Err(Error::ImageTooSmall { width: w, height: h, min });
    }
    let (w, h) = (w as usize, h as usize);
    let x = luma_plane(a);
    let y = luma_plane(b);
    let k = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let planes = [&x, &y, &xx, &yy, &xy];
    let f = par::map(&planes, |p| filter_valid(p, w, h, &k));
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);
    let n = f[0].len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (f[0][i], f[1][i]);
            let vx = f[2][i] - mx * mx;
            let vy = f[3][i] - my * my;
            let cxy = f[4][i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Peak signal-to-noise ratio in dB over all channels, capped at [`PSNR_CAP_DB`].
/// Images with different channel counts are compared as RGB.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    let (a, b) = if a.channels() == b.channels() {
        (a.clone(), b.clone())
    } else {
        (a.to_rgb(), b.to_rgb())
    };
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
        .sum();
    let mse = sse / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub tile_id: String,
    pub ssim: f64,
    pub psnr: f64,
}

pub fn sample(tile_id: impl Into<String>, reference: &ImageBuffer, test: &ImageBuffer) -> Result<MetricSample> {
    Ok(MetricSample {
        tile_id: tile_id.into(),
        ssim: ssim(reference, test)?,
        psnr: psnr(reference, test)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub psnr_cap_db: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(samples: &[MetricSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (ssim_mean, ssim_std) = mean_std(&samples.iter().map(|s| s.ssim).collect::<Vec<_>>());
    let (psnr_mean, psnr_std) = mean_std(&samples.iter().map(|s| s.psnr).collect::<Vec<_>>());
    Ok(MetricsReport {
        n: samples.len(),
        ssim_mean,
        ssim_std,
        psnr_mean,
        psnr_std,
        psnr_cap_db: PSNR_CAP_DB,
    })
}

/// `mean ± std` with three decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

impl MetricsReport {
    /// `"<ssim> / <psnr>"`, e.g. `0.317 ± 0.054 / 10.733 ± 1.221`.
    pub fn summary(&self) -> String {
        format!(
            "{} / {}",
            format_mean_std(self.ssim_mean, self.ssim_std),
            format_mean_std(self.psnr_mean, self.psnr_std)
        )
    }
}

/// Plain-text table with one row per labelled report, columns padded to align.
pub fn render_table(rows: &[(String, MetricsReport)]) -> String {
    let header = ["Model".to_string(), "SSIM".to_string(), "PSNR".to_string()];
    let body: Vec<[String; 3]> = rows
        .iter()
        .map(|(label, r)| {
            [
                label.clone(),
                format_mean_std(r.ssim_mean, r.ssim_std),
                format_mean_std(r.psnr_mean, r.psnr_std),
            ]
        })
        .collect();
    let width = |c: usize| {
        body.iter()
            .map(|r| r[c].chars().count())
            .chain([header[c].chars().count()])
            .max()
            .unwrap_or(0)
    };
    let widths = [width(0), width(1), width(2)];
    let line = |cells: &[String; 3]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        format!("| {} |", padded.join(" | "))
    };
    let rule = format!("|{}|", widths.map(|w| "-".repeat(w + 2)).join("|"));
    let mut out = vec![line(&header), rule];
    out.extend(body.iter().map(line));
    out.join("\n") + "\n"
}

/// Serialized form written by the `metrics` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsOutput {
    pub report: MetricsReport,
    pub samples: Vec<MetricSample>,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Scores every PNG in `test_dir` against the same-named file in `ref_dir`.
pub fn evaluate_dirs(ref_dir: &Path, test_dir: &Path) -> Result<Vec<MetricSample>> {
    let files = png_files(test_dir)?;
    if files.is_empty() {
        return Err(Error::EmptyInput);
    }
    par::map(&files, |test_path| {
        let name = test_path.file_name().expect("listed file");
        let reference = ImageBuffer::load(ref_dir.join(name))?;
        let test = ImageBuffer::load(test_path)?;
        sample(test_path.file_stem().expect("listed file").to_string_lossy(), &reference, &test)
    })
    .into_iter()
    .collect()
}

/// Scores a single image pair, or two directories of same-named PNG tiles.
pub fn evaluate_paths(reference: &Path, test: &Path) -> Result<Vec<MetricSample>> {
    if test.is_dir() {
        return evaluate_dirs(reference, test);
    }
    let id = test.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(vec![sample(id, &ImageBuffer::load(reference)?, &ImageBuffer::load(test)?)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_gray(w: u32, h: u32, rng: &mut ChaCha8Rng) -> ImageBuffer {
        let data = (0..w * h).map(|_| rng.random_range(20..=235)).collect();
        ImageBuffer::new(w, h, 1, data).unwrap()
    }

    /// Windowed statistics evaluated directly at every window position.
    fn ssim_reference(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
        let (w, h) = (a.width() as usize, a.height() as usize);
        let g = |i: usize| (-((i as f64 - 5.0).powi(2)) / 4.5).exp();
        let norm: f64 = (0..11).flat_map(|i| (0..11).map(move |j| g(i) * g(j))).sum();
        let c1 = (0.01f64 * 255.0).powi(2);
        let c2 = (0.03f64 * 255.0).powi(2);
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wt = g(i) * g(j) / norm;
                        mx += wt * a.get((x + i) as u32, (y + j) as u32, 0) as f64;
                        my += wt * b.get((x + i) as u32, (y + j) as u32, 0) as f64;
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wt = g(i) * g(j) / norm;
                        let p = a.get((x + i) as u32, (y + j) as u32, 0) as f64 - mx;
                        let q = b.get((x + i) as u32, (y + j) as u32, 0) as f64 - my;
                        vx += wt * p * p;
                        vy += wt * q * q;
                        cxy += wt * p * q;
                    }
                }
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            let a = random_gray(32, 24, &mut rng);
            let b = random_gray(32, 24, &mut rng);
            assert!((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_gray(40, 40, &mut rng);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn inverted_checkerboard_is_anticorrelated() {
        let a = ImageBuffer::from_gray_fn(16, 16, |x, y| if (x + y) % 2 == 0 { 0 } else { 255 });
        let b = ImageBuffer::from_gray_fn(16, 16, |x, y| 255 - a.get(x, y, 0));
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.0, "{s}");
        assert!((s - ssim_reference(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn uniform_offset_psnr() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_gray(64, 64, &mut rng);
        let b = ImageBuffer::new(64, 64, 1, a.data().iter().map(|v| v + 10).collect()).unwrap();
        // 10 log10(255^2 / 100)
        assert!((psnr(&a, &b).unwrap() - 28.130803608679106).abs() < 1e-3);
    }

    #[test]
    fn errors() {
        let a = ImageBuffer::filled(20, 20, 1, 0);
        let b = ImageBuffer::filled(21, 20, 1, 0);
        assert!(matches!(ssim(&a, &b), Err(Error::DimensionMismatch(..))));
        assert!(matches!(psnr(&a, &b), Err(Error::DimensionMismatch(..))));
        let s = ImageBuffer::filled(10, 20, 1, 0);
        assert!(matches!(ssim(&s, &s), Err(Error::ImageTooSmall { .. })));
        assert!(matches!(aggregate(&[]), Err(Error::EmptyInput)));
    }

    fn s(ssim: f64, psnr: f64) -> MetricSample {
        MetricSample {
            tile_id: String::new(),
            ssim,
            psnr,
        }
    }

    #[test]
    fn aggregation() {
        let r = aggregate(&[s(0.42, 12.0)]).unwrap();
        assert_eq!((r.ssim_mean, r.ssim_std), (0.42, 0.0));
        let r = aggregate(&[s(0.3, 10.0), s(0.4, 12.0)]).unwrap();
        assert!((r.ssim_mean - 0.35).abs() < 1e-12);
        assert!((r.ssim_std - 0.1 / 2f64.sqrt()).abs() < 1e-12);
        let r = aggregate(&vec![s(0.5, 20.0); 100]).unwrap();
        assert_eq!(r.ssim_std, 0.0);
        assert_eq!(r.psnr_std, 0.0);
    }

    #[test]
    fn table_shape() {
        let r = MetricsReport {
            n: 10,
            ssim_mean: 0.317,
            ssim_std: 0.054,
            psnr_mean: 10.733,
            psnr_std: 1.221,
            psnr_cap_db: PSNR_CAP_DB,
        };
        assert_eq!(r.summary(), "0.317 ± 0.054 / 10.733 ± 1.221");
        let t = render_table(&[("#5".into(), r)]);
        assert_eq!(
            t,
            "| Model | SSIM          | PSNR           |\n|-------|---------------|----------------|\n| #5    | 0.317 ± 0.054 | 10.733 ± 1.221 |\n"
        );
    }

    #[test]
    fn psnr_falls_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = ImageBuffer::from_gray_fn(64, 64, |x, y| (64 + (x * 2 + y) % 128) as u8);
        let mut last = f64::INFINITY;
        for sigma in [1.0, 2.0, 4.0, 8.0] {
            let n = Normal::new(0.0, sigma).unwrap();
            let data = base
                .data()
                .iter()
                .map(|&v| (v as f64 + n.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
                .collect();
            let p = psnr(&base, &ImageBuffer::new(64, 64, 1, data).unwrap()).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(20))]
        #[test]
        fn ssim_symmetric_and_bounded(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_gray(24, 24, &mut rng);
            let b = random_gray(24, 24, &mut rng);
            let ab = ssim(&a, &b).unwrap();
            proptest::prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-9);
            proptest::prop_assert!(ab <= 1.0);
        }

        /// A common offset leaves the contrast-structure term untouched and can
        /// only shrink the luminance penalty `(mx - my)^2 / (mx^2 + my^2 + C1)`.
        #[test]
        fn common_offset_only_moves_luminance_term(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_gray(24, 24, &mut rng);
            let b = random_gray(24, 24, &mut rng);
            let shift = |img: &ImageBuffer| ImageBuffer::new(24, 24, 1, img.data().iter().map(|v| v + 15).collect()).unwrap();
            let (before, after) = (ssim(&a, &b).unwrap(), ssim(&shift(&a), &shift(&b)).unwrap());
            proptest::prop_assert!((after - ssim_reference(&shift(&a), &shift(&b))).abs() < 1e-6);
            proptest::prop_assert!(before.abs() < 0.2 || (after - before) / before.abs() >= -1e-9);
            proptest::prop_assert!((ssim(&shift(&a), &shift(&a)).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}

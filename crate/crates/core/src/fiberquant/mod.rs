//! Collagen fiber quantification: blue-region masking in HSV, structure-tensor
//! orientation coherency, per-group summaries and Welch t-tests.

mod stats;

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use stats::{
    group_stats, pvalue_matrix, summarize, welch_t_test, BoxPlot, GroupStats, PValueMatrix,
    StatsReport,
};

use crate::datapipe::{load_manifest, resolve_path, DataError, Label};

#[derive(Debug, Error)]
pub enum FiberError {
    #[error("coherency undefined: empty mask")]
    EmptyMask,
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("mask has {mask} pixels, image has {image}")]
    MaskSize { mask: usize, image: usize },
    #[error("degenerate t-test input: {0}")]
    Degenerate(String),
    #[error("need at least two groups, got {0}")]
    TooFewGroups(usize),
    #[error("groups `{a}` vs `{b}`: {source}")]
    Pair {
        a: String,
        b: String,
        #[source]
        source: Box<FiberError>,
    },
    #[error("empty sample")]
    EmptySample,
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FiberError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        FiberError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FiberError>;

/// HSV window selecting blue-stained collagen. Hue in degrees, saturation and
/// value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskThresholds {
    pub hue_lo: f64,
    pub hue_hi: f64,
    pub sat_min: f64,
    pub val_min: f64,
}

impl Default for MaskThresholds {
    fn default() -> Self {
        MaskThresholds {
            hue_lo: 150.0,
            hue_hi: 270.0,
            sat_min: 0.15,
            val_min: 0.10,
        }
    }
}

/// `(hue in [0, 360), saturation, value)`; hue is 0 for greys.
pub fn rgb_to_hsv([r, g, b]: [u8; 3]) -> (f64, f64, f64) {
    let (r, g, b) = (
        f64::from(r) / 255.0,
        f64::from(g) / 255.0,
        f64::from(b) / 255.0,
    );
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

/// Row-major boolean mask, `true` where the pixel falls in the HSV window.
#[derive(Debug, Clone, PartialEq)]
pub struct CollagenMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
    pub thresholds: MaskThresholds,
}

impl CollagenMask {
    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.pixels.len().max(1) as f64
    }
}

pub fn collagen_mask(image: &RgbImage, t: &MaskThresholds) -> CollagenMask {
    let pixels = image
        .pixels()
        .map(|p| {
            let (h, s, v) = rgb_to_hsv(p.0);
            (t.hue_lo..=t.hue_hi).contains(&h) && s >= t.sat_min && v >= t.val_min
        })
        .collect();
    CollagenMask {
        height: image.height() as usize,
        width: image.width() as usize,
        pixels,
        thresholds: *t,
    }
}

/// Luminance `0.299 R + 0.587 G + 0.114 B` in `[0, 255]`.
pub fn luminance(image: &RgbImage) -> Vec<f64> {
    image
        .pixels()
        .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
        .collect()
}

/// Normalised Gaussian taps truncated at `ceil(3 sigma)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable convolution with clamped borders.
fn smooth(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &c)| c * plane[y * w + clamp_index(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &c)| c * tmp[clamp_index(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Masked averages of the smoothed gradient products.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureTensor {
    pub jxx: f64,
    pub jxy: f64,
    pub jyy: f64,
}

impl StructureTensor {
    /// `sqrt((Jxx - Jyy)^2 + 4 Jxy^2) / (Jxx + Jyy + 1e-12)`, i.e.
    /// `(l_max - l_min) / (l_max + l_min)`.
    pub fn coherency(&self) -> f64 {
        let num = ((self.jxx - self.jyy).powi(2) + 4.0 * self.jxy * self.jxy).sqrt();
        (num / (self.jxx + self.jyy + 1e-12)).min(1.0)
    }
}

pub fn structure_tensor(
    gray: &[f64],
    height: usize,
    width: usize,
    mask: &[bool],
    sigma: f64,
) -> Result<StructureTensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(FiberError::BadSigma(sigma));
    }
    if mask.len() != gray.len() || gray.len() != height * width {
        return Err(FiberError::MaskSize {
            mask: mask.len(),
            image: height * width,
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(FiberError::EmptyMask);
    }
    let at = |y: usize, x: isize| gray[y * width + clamp_index(x, width)];
    let at_y = |y: isize, x: usize| gray[clamp_index(y, height) * width + x];
    let mut fxx = vec![0.0; gray.len()];
    let mut fxy = vec![0.0; gray.len()];
    let mut fyy = vec![0.0; gray.len()];
    for y in 0..height {
        for x in 0..width {
            let fx = 0.5 * (at(y, x as isize + 1) - at(y, x as isize - 1));
            let fy = 0.5 * (at_y(y as isize + 1, x) - at_y(y as isize - 1, x));
            let i = y * width + x;
            fxx[i] = fx * fx;
            fxy[i] = fx * fy;
            fyy[i] = fy * fy;
        }
    }
    let kernel = gaussian_kernel(sigma);
    let avg = |plane: &[f64]| -> f64 {
        let s = smooth(plane, height, width, &kernel);
        s.iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum::<f64>()
            / count as f64
    };
    Ok(StructureTensor {
        jxx: avg(&fxx),
        jxy: avg(&fxy),
        jyy: avg(&fyy),
    })
}

/// Coherency of a grey image over the masked region.
pub fn coherency(
    gray: &[f64],
    height: usize,
    width: usize,
    mask: &[bool],
    sigma: f64,
) -> Result<f64> {
    Ok(structure_tensor(gray, height, width, mask, sigma)?.coherency())
}

/// Coherency (`None` for an empty mask) and masked fraction of one image.
pub fn measure_image(
    image: &RgbImage,
    t: &MaskThresholds,
    sigma: f64,
) -> Result<(Option<f64>, f64)> {
    let mask = collagen_mask(image, t);
    let gray = luminance(image);
    match coherency(&gray, mask.height, mask.width, &mask.pixels, sigma) {
        Ok(c) => Ok((Some(c), mask.fraction())),
        Err(FiberError::EmptyMask) => Ok((None, 0.0)),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherencyRecord {
    pub path: String,
    pub label: Label,
    /// Absent when the collagen mask is empty.
    pub coherency: Option<f64>,
    pub masked_fraction: f64,
}

/// Measures every image in a manifest, spreading images over the available
/// cores. Output order follows the manifest.
pub fn measure_manifest(
    manifest_path: &Path,
    t: &MaskThresholds,
    sigma: f64,
) -> Result<Vec<CoherencyRecord>> {
    let manifest = load_manifest(manifest_path)?;
    let samples = &manifest.samples;
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(samples.len().max(1));
    let chunk = samples.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<CoherencyRecord>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| {
                            let path = resolve_path(manifest_path, &s.image_path);
                            let img = crate::datapipe::read_rgb(&path)?;
                            let (coherency, masked_fraction) = measure_image(&img, t, sigma)?;
                            Ok(CoherencyRecord {
                                path: s.image_path.clone(),
                                label: s.label,
                                coherency,
                                masked_fraction,
                            })
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn write_coherency_csv(records: &[CoherencyRecord], path: &Path) -> Result<()> {
    let mut s = String::from("path,label,coherency,masked_fraction\n");
    for r in records {
        let c = r.coherency.map_or_else(String::new, |c| format!("{c:.9}"));
        s.push_str(&format!(
            "{},{},{c},{:.6}\n",
            r.path, r.label, r.masked_fraction
        ));
    }
    std::fs::write(path, s).map_err(|e| FiberError::io(path, e))
}

pub fn read_coherency_csv(path: &Path) -> Result<Vec<CoherencyRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| FiberError::io(path, e))?;
    let bad = |line: usize, message: String| FiberError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "path,label,coherency,masked_fraction")) => {}
        _ => {
            return Err(bad(
                1,
                "expected header `path,label,coherency,masked_fraction`".into(),
            ))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.rsplitn(4, ',').collect();
        let [frac, coh, label, path_field] = fields[..] else {
            return Err(bad(line_no, format!("expected 4 fields in `{line}`")));
        };
        let label: Label = label
            .parse()
            .map_err(|_| bad(line_no, format!("unknown label `{label}`")))?;
        let coherency = match coh {
            "" => None,
            c => Some(
                c.parse()
                    .map_err(|_| bad(line_no, format!("bad coherency `{c}`")))?,
            ),
        };
        let masked_fraction = frac
            .parse()
            .map_err(|_| bad(line_no, format!("bad fraction `{frac}`")))?;
        out.push(CoherencyRecord {
            path: path_field.to_string(),
            label,
            coherency,
            masked_fraction,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use image::Rgb;
    use proptest::prelude::*;

    use super::*;

    fn grating(h: usize, w: usize, period: f64, vertical: bool) -> Vec<f64> {
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                let t = if vertical { x } else { y };
                100.0 + 50.0 * (2.0 * std::f64::consts::PI * t / period).sin()
            })
            .collect()
    }

    fn rotate90(src: &[f64], h: usize, w: usize) -> Vec<f64> {
        // New image is w x h: out[y][x] = src[h-1-x][y].
        let mut out = vec![0.0; h * w];
        for y in 0..w {
            for x in 0..h {
                out[y * h + x] = src[(h - 1 - x) * w + y];
            }
        }
        out
    }

    #[test]
    fn hsv_mask_cases() {
        let t = MaskThresholds::default();
        let blue = RgbImage::from_pixel(4, 4, Rgb([0, 0, 255]));
        assert_eq!(collagen_mask(&blue, &t).count(), 16);
        let red = RgbImage::from_pixel(4, 4, Rgb([255, 0, 0]));
        assert_eq!(collagen_mask(&red, &t).count(), 0);
        let card = RgbImage::from_fn(6, 3, |x, _| {
            if x < 3 {
                Rgb([30, 60, 200])
            } else {
                Rgb([200, 40, 40])
            }
        });
        let m = collagen_mask(&card, &t);
        for (i, &p) in m.pixels.iter().enumerate() {
            assert_eq!(p, i % 6 < 3);
        }
        assert_eq!(rgb_to_hsv([0, 0, 255]).0, 240.0);
        assert_eq!(rgb_to_hsv([0, 255, 0]).0, 120.0);
        assert_eq!(rgb_to_hsv([255, 0, 255]).0, 300.0);
    }

    #[test]
    fn mask_is_idempotent() {
        let img = RgbImage::from_fn(8, 8, |x, y| Rgb([(x * 30) as u8, (y * 25) as u8, 180]));
        let t = MaskThresholds::default();
        let m = collagen_mask(&img, &t);
        let masked = RgbImage::from_fn(8, 8, |x, y| {
            if m.pixels[(y * 8 + x) as usize] {
                *img.get_pixel(x, y)
            } else {
                Rgb([0, 0, 0])
            }
        });
        assert_eq!(collagen_mask(&masked, &t).pixels, m.pixels);
    }

    #[test]
    fn grating_and_constant() {
        let (h, w) = (40, 48);
        let full = vec![true; h * w];
        let g = grating(h, w, 8.0, true);
        let c = coherency(&g, h, w, &full, 2.0).unwrap();
        assert!(c >= 0.95, "{c}");
        let rotated = rotate90(&g, h, w);
        let cr = coherency(&rotated, w, h, &full, 2.0).unwrap();
        assert!((c - cr).abs() < 1e-6);
        assert_eq!(coherency(&vec![7.0; h * w], h, w, &full, 2.0).unwrap(), 0.0);
        assert!(matches!(
            coherency(&g, h, w, &vec![false; h * w], 2.0),
            Err(FiberError::EmptyMask)
        ));
        assert!(matches!(
            coherency(&g, h, w, &full, 0.0),
            Err(FiberError::BadSigma(_))
        ));
    }

    #[test]
    fn empty_mask_image_reports_none() {
        let red = RgbImage::from_pixel(5, 5, Rgb([220, 10, 10]));
        assert_eq!(
            measure_image(&red, &MaskThresholds::default(), 2.0).unwrap(),
            (None, 0.0)
        );
    }

    proptest! {
        #[test]
        fn coherency_bounds_and_invariances(
            seed in any::<u64>(),
            alpha in 0.1f64..10.0,
            beta in -50.0f64..50.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (12, 10);
            let img: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..255.0)).collect();
            let mask: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.6)).collect();
            prop_assume!(mask.iter().any(|&m| m));
            let st = structure_tensor(&img, h, w, &mask, 1.5).unwrap();
            prop_assert!(st.jxx >= 0.0 && st.jyy >= 0.0);
            prop_assert!(st.jxy * st.jxy <= st.jxx * st.jyy * (1.0 + 1e-12));
            let c = st.coherency();
            prop_assert!((0.0..=1.0).contains(&c));

            let affine: Vec<f64> = img.iter().map(|v| alpha * v + beta).collect();
            let ca = coherency(&affine, h, w, &mask, 1.5).unwrap();
            prop_assert!((c - ca).abs() < 1e-9);

            let mut img_r = img.clone();
            let mut mask_r: Vec<f64> = mask.iter().map(|&m| f64::from(u8::from(m))).collect();
            let (mut hh, mut ww) = (h, w);
            for _ in 0..3 {
                img_r = rotate90(&img_r, hh, ww);
                mask_r = rotate90(&mask_r, hh, ww);
                std::mem::swap(&mut hh, &mut ww);
                let m: Vec<bool> = mask_r.iter().map(|&v| v > 0.5).collect();
                let cr = coherency(&img_r, hh, ww, &m, 1.5).unwrap();
                prop_assert!((c - cr).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn coherency_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let records = vec![
            CoherencyRecord {
                path: "a/b,c.png".into(),
                label: Label::Day3,
                coherency: Some(0.25),
                masked_fraction: 0.5,
            },
            CoherencyRecord {
                path: "x.png".into(),
                label: Label::Control,
                coherency: None,
                masked_fraction: 0.0,
            },
        ];
        write_coherency_csv(&records, &path).unwrap();
        assert_eq!(read_coherency_csv(&path).unwrap(), records);
    }
}

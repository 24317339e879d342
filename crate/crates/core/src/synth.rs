//! Synthetic texture datasets standing in for histology slides.
//!
//! The target task has six classes of blue "fiber" textures on a red
//! background. Class `k` superimposes gratings whose orientations are spread
//! over `pi * (1 - k / 5)`, so class 0 is isotropic and class 5 is a single
//! aligned grating; the stripe period also grows with the class. The source
//! task (used for pretraining) is disjoint: four grating orientations, a
//! checkerboard and random blobs, in random two-colour palettes.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datapipe::{write_png, DataError, Label, Manifest, Result, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Source,
    Target,
}

impl std::str::FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(SynthKind::Source),
            "target" => Ok(SynthKind::Target),
            other => Err(format!(
                "unknown dataset kind `{other}` (expected source or target)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub kind: SynthKind,
    /// Images per class, in label order.
    pub counts: [usize; Label::COUNT],
    pub size: u32,
    pub seed: u64,
}

impl SynthOptions {
    pub fn uniform(kind: SynthKind, per_class: usize, seed: u64) -> Self {
        SynthOptions {
            kind,
            counts: [per_class; Label::COUNT],
            size: 80,
            seed,
        }
    }
}

const FIBER: [f64; 3] = [45.0, 60.0, 185.0];
const STROMA: [f64; 3] = [205.0, 75.0, 90.0];

/// Stripe period in pixels at 80 px resolution.
fn target_period(class: usize) -> f64 {
    5.0 + 1.3 * class as f64
}

fn blend(a: [f64; 3], b: [f64; 3], t: f64) -> Rgb<u8> {
    Rgb(std::array::from_fn(|i| {
        (a[i] + (b[i] - a[i]) * t).round().clamp(0.0, 255.0) as u8
    }))
}

fn target_image(class: usize, size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let spread = PI * (1.0 - class as f64 / 5.0);
    let base = rng.gen_range(0.0..PI);
    let period = target_period(class) * rng.gen_range(0.92..1.08);
    let waves: Vec<(f64, f64, f64)> = (0..12)
        .map(|_| {
            let theta = base + spread * rng.gen_range(-0.5..0.5);
            (theta.cos(), theta.sin(), rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let noise = Normal::new(0.0, 0.12).expect("valid std");
    let k = 2.0 * PI / period;
    let n = size as usize;
    let field: Vec<f64> = (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64, (i / n) as f64);
            waves
                .iter()
                .map(|&(c, s, phase)| (k * (x * c + y * s) + phase).cos())
                .sum()
        })
        .collect();
    // Aligned waves can cancel; fix the contrast by normalising to unit rms.
    let rms = (field.iter().map(|f| f * f).sum::<f64>() / field.len() as f64)
        .sqrt()
        .max(1e-9);
    RgbImage::from_fn(size, size, |x, y| {
        let t = 0.5 + 0.45 * field[y as usize * n + x as usize] / rms + noise.sample(rng);
        blend(STROMA, FIBER, t.clamp(0.0, 1.0))
    })
}

fn source_image(class: usize, size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let a: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..255.0));
    let b: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..255.0));
    let period = rng.gen_range(6.0..14.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, 0.08).expect("valid std");
    let blobs: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| {
            let s = f64::from(size);
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(4.0..10.0),
            )
        })
        .collect();
    RgbImage::from_fn(size, size, |x, y| {
        let (x, y) = (f64::from(x), f64::from(y));
        let t = match class {
            0..=3 => {
                let theta = class as f64 * PI / 4.0 + rng.gen_range(-0.05..0.05);
                0.5 + 0.5 * (2.0 * PI / period * (x * theta.cos() + y * theta.sin()) + phase).cos()
            }
            4 => {
                let cell = period / 2.0;
                f64::from(u8::from(
                    ((x / cell).floor() + (y / cell).floor()) as i64 % 2 == 0,
                ))
            }
            _ => blobs
                .iter()
                .map(|&(bx, by, r)| (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * r * r)).exp())
                .fold(0.0, f64::max),
        };
        blend(a, b, (t + noise.sample(rng)).clamp(0.0, 1.0))
    })
}

/// Writes `images/*.png` and `manifest.csv` under `out_dir` and returns the
/// manifest path. Identical options give byte-identical output.
pub fn generate(out_dir: &Path, opts: &SynthOptions) -> Result<PathBuf> {
    if opts.size == 0 {
        return Err(DataError::ZeroSize(0, 0));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| DataError::io(&images, e))?;
    let mut samples = Vec::new();
    for (class, &n) in opts.counts.iter().enumerate() {
        let label = Label::from_index(class).expect("six classes");
        for i in 0..n {
            let seed =
                opts.seed ^ ((class as u64) << 48) ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = match opts.kind {
                SynthKind::Target => target_image(class, opts.size, &mut rng),
                SynthKind::Source => source_image(class, opts.size, &mut rng),
            };
            let name = format!("{}_{i:04}.png", label.name().to_lowercase());
            write_png(&img, &images.join(&name))?;
            samples.push(Sample {
                image_path: format!("images/{name}"),
                label,
                dataset_id: 1,
            });
        }
    }
    let manifest = out_dir.join("manifest.csv");
    Manifest::new(samples).write_csv(&manifest)?;
    Ok(manifest)
}

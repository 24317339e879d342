//! Dataset bookkeeping: manifest ingestion, stratified 6:2:2 split, the ×12
//! flip/rotate augmentation, oversampling to class balance, bilinear resize
//! and channel normalization.

mod prepare;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{imageops, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use prepare::read_rgb;
pub(crate) use prepare::write_png;
pub use prepare::{load_dataset, prepare, ClassCounts, Dataset, PrepareOptions, PrepareSummary};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: line {line}: unknown label `{label}`")]
    UnknownLabel {
        path: PathBuf,
        line: u64,
        label: String,
    },
    #[error("cannot oversample empty class {0}")]
    EmptyClass(usize),
    #[error("nothing to oversample: every class is empty")]
    NoSamples,
    #[error("invalid target size {0}x{1}")]
    ZeroSize(u32, u32),
    #[error("split ratios must be positive, got {0:?}")]
    BadRatios([u32; 3]),
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// The six wound-healing stages, in class-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Control,
    Day0,
    Day3,
    Day7,
    Day10,
    DelayDay10,
}

impl Label {
    pub const ALL: [Label; 6] = [
        Label::Control,
        Label::Day0,
        Label::Day3,
        Label::Day7,
        Label::Day10,
        Label::DelayDay10,
    ];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Label> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Control => "Control",
            Label::Day0 => "Day0",
            Label::Day3 => "Day3",
            Label::Day7 => "Day7",
            Label::Day10 => "Day10",
            Label::DelayDay10 => "DelayDay10",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Label::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub image_path: String,
    pub label: Label,
    pub dataset_id: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    label: String,
    dataset_id: u32,
}

impl Manifest {
    pub fn new(samples: Vec<Sample>) -> Self {
        Manifest { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self) -> [usize; Label::COUNT] {
        let mut counts = [0; Label::COUNT];
        for s in &self.samples {
            counts[s.label.index()] += 1;
        }
        counts
    }

    pub fn by_class(&self) -> Vec<Vec<Sample>> {
        let mut classes = vec![Vec::new(); Label::COUNT];
        for s in &self.samples {
            classes[s.label.index()].push(s.clone());
        }
        classes
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for s in &self.samples {
            w.serialize(ManifestRow {
                path: s.image_path.clone(),
                label: s.label.to_string(),
                dataset_id: s.dataset_id,
            })
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| DataError::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::io(path, source),
        kind => DataError::Malformed {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Reads a `path,label,dataset_id` CSV.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "dataset_id"] {
        return Err(DataError::Malformed {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "expected header `path,label,dataset_id`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let row: ManifestRow =
            record
                .deserialize(Some(&headers))
                .map_err(|e| DataError::Malformed {
                    path: path.to_path_buf(),
                    line,
                    message: e.to_string(),
                })?;
        let label = row.label.parse().map_err(|label| DataError::UnknownLabel {
            path: path.to_path_buf(),
            line,
            label,
        })?;
        samples.push(Sample {
            image_path: row.path,
            label,
            dataset_id: row.dataset_id,
        });
    }
    Ok(Manifest { samples })
}

/// Resolves a manifest entry relative to the manifest's directory.
pub fn resolve_path(manifest_path: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitResult {
    pub train: Manifest,
    pub validation: Manifest,
    pub test: Manifest,
    pub seed: u64,
}

/// Splits `n` items by `ratios`: floor of each exact share, then the leftover
/// units go to the parts with the largest fractional remainders (ties resolved
/// train, validation, test).
pub fn allocate(n: usize, ratios: [u32; 3]) -> [usize; 3] {
    let total: u64 = ratios.iter().map(|&r| u64::from(r)).sum();
    let mut parts = [0usize; 3];
    // Remainders are kept as exact numerators over `total`.
    let mut remainders = [0u64; 3];
    for i in 0..3 {
        let share = n as u64 * u64::from(ratios[i]);
        parts[i] = (share / total) as usize;
        remainders[i] = share % total;
    }
    let mut leftover = n - parts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].cmp(&remainders[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        parts[i] += 1;
        leftover -= 1;
    }
    parts
}

/// Per-class seeded shuffle followed by [`allocate`]. Classes with fewer
/// samples than parts simply leave some parts empty.
pub fn stratified_split(manifest: &Manifest, ratios: [u32; 3], seed: u64) -> Result<SplitResult> {
    if ratios.contains(&0) {
        return Err(DataError::BadRatios(ratios));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for mut class in manifest.by_class() {
        class.shuffle(&mut rng);
        let [a, b, _] = allocate(class.len(), ratios);
        let mut rest = class.into_iter();
        out[0].extend(rest.by_ref().take(a));
        out[1].extend(rest.by_ref().take(b));
        out[2].extend(rest);
    }
    let [train, validation, test] = out.map(Manifest::new);
    Ok(SplitResult {
        train,
        validation,
        test,
        seed,
    })
}

/// The twelve augmentations: rotations by 0/90/180/270 degrees, each followed
/// by identity, horizontal flip and vertical flip, in that order.
pub fn augment12(image: &RgbImage) -> Vec<RgbImage> {
    let rotations = [
        image.clone(),
        imageops::rotate90(image),
        imageops::rotate180(image),
        imageops::rotate270(image),
    ];
    rotations
        .into_iter()
        .flat_map(|r| {
            let h = imageops::flip_horizontal(&r);
            let v = imageops::flip_vertical(&r);
            [r, h, v]
        })
        .collect()
}

/// Pads every class with uniform draws (with replacement) from itself until
/// it matches the largest class.
pub fn oversample_balance<T: Clone>(classes: &[Vec<T>], seed: u64) -> Result<Vec<Vec<T>>> {
    let target = classes.iter().map(Vec::len).max().unwrap_or(0);
    if target == 0 {
        return Err(DataError::NoSamples);
    }
    if let Some(empty) = classes.iter().position(Vec::is_empty) {
        return Err(DataError::EmptyClass(empty));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(classes
        .iter()
        .map(|class| {
            let mut out = class.clone();
            while out.len() < target {
                out.push(class[rng.gen_range(0..class.len())].clone());
            }
            out
        })
        .collect())
}

/// Source coordinate and weights for one output axis (align-corners false).
fn axis_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of one row-major plane.
pub fn resize_plane(
    src: &[f64],
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if out_h == 0 || out_w == 0 || height == 0 || width == 0 {
        return Err(DataError::ZeroSize(out_w as u32, out_h as u32));
    }
    assert_eq!(src.len(), height * width, "plane size");
    let ys = axis_taps(out_h, height);
    let xs = axis_taps(out_w, width);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * width + x0] * (1.0 - fx) + src[y0 * width + x1] * fx;
            let bottom = src[y1 * width + x0] * (1.0 - fx) + src[y1 * width + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// Channelwise bilinear resize of an 8-bit RGB image, rounding to nearest.
pub fn resize_bilinear(image: &RgbImage, out_h: u32, out_w: u32) -> Result<RgbImage> {
    if out_h == 0 || out_w == 0 {
        return Err(DataError::ZeroSize(out_w, out_h));
    }
    let (w, h) = image.dimensions();
    if (w, h) == (out_w, out_h) {
        return Ok(image.clone());
    }
    let mut out = RgbImage::new(out_w, out_h);
    for c in 0..3 {
        let plane: Vec<f64> = image.pixels().map(|p| f64::from(p[c])).collect();
        let resized = resize_plane(
            &plane,
            h as usize,
            w as usize,
            out_h as usize,
            out_w as usize,
        )?;
        for (px, v) in out.pixels_mut().zip(resized) {
            px[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Per-channel standardisation constants applied to `x / 255`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    /// ImageNet channel statistics.
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Converts an RGB image to a `[3, H, W]` tensor of `(x/255 - mean) / std`.
pub fn normalize(image: &RgbImage, norm: &Normalization) -> Tensor<f32> {
    let (w, h) = image.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in image.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (f32::from(px[c]) / 255.0 - norm.mean[c]) / norm.std[c];
        }
    }
    Tensor::new([3, h as usize, w as usize], data).expect("3 planes")
}

//! Materialises a split, augmented and balanced dataset on disk.
//!
//! Layout under the output directory:
//!
//! ```text
//! split/train.csv  split/val.csv  split/test.csv   original samples per part
//! split/summary.json                              per-class counts per stage
//! prepared/train.csv                              balanced, augmented, resized
//! prepared/val.csv  prepared/test.csv             resized only
//! prepared/{train,val,test}/*.png
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{
    augment12, load_manifest, normalize, oversample_balance, resize_bilinear, resolve_path,
    stratified_split, DataError, Label, Manifest, Normalization, Result, Sample,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub input_size: u32,
    pub ratios: [u32; 3],
    pub seed: u64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            input_size: 64,
            ratios: [6, 2, 2],
            seed: 0,
        }
    }
}

/// One row of the per-class split summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub class: Label,
    pub training: usize,
    pub validation: usize,
    pub testing: usize,
    pub augmented_training: usize,
    pub balanced_training: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub seed: u64,
    pub input_size: u32,
    pub classes: Vec<ClassCounts>,
}

/// Reads any supported image file as 8-bit RGB.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub(crate) fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| DataError::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| DataError::io(path, e))
}

fn stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map_or_else(|| "img".to_string(), |s| s.to_string_lossy().into_owned())
}

fn absolute(manifest: &Manifest, manifest_path: &Path) -> Manifest {
    Manifest::new(
        manifest
            .samples
            .iter()
            .map(|s| Sample {
                image_path: resolve_path(manifest_path, &s.image_path)
                    .to_string_lossy()
                    .into_owned(),
                ..s.clone()
            })
            .collect(),
    )
}

/// Split, augment (training part only), resize and balance the dataset
/// described by `manifest_path`, writing everything under `out_dir`.
pub fn prepare(
    manifest_path: &Path,
    out_dir: &Path,
    opts: &PrepareOptions,
) -> Result<PrepareSummary> {
    let manifest = absolute(&load_manifest(manifest_path)?, manifest_path);
    let split = stratified_split(&manifest, opts.ratios, opts.seed)?;

    let split_dir = out_dir.join("split");
    let prep_dir = out_dir.join("prepared");
    create_dir(&split_dir)?;
    for part in ["train", "val", "test"] {
        create_dir(&prep_dir.join(part))?;
    }
    split.train.write_csv(split_dir.join("train.csv"))?;
    split.validation.write_csv(split_dir.join("val.csv"))?;
    split.test.write_csv(split_dir.join("test.csv"))?;

    let size = opts.input_size;
    let mut augmented: Vec<Vec<Sample>> = vec![Vec::new(); Label::COUNT];
    for (i, s) in split.train.samples.iter().enumerate() {
        let img = read_rgb(Path::new(&s.image_path))?;
        for (k, aug) in augment12(&img).iter().enumerate() {
            let name = format!("{i:05}_{}_a{k:02}.png", stem(&s.image_path));
            write_png(
                &resize_bilinear(aug, size, size)?,
                &prep_dir.join("train").join(&name),
            )?;
            augmented[s.label.index()].push(Sample {
                image_path: format!("train/{name}"),
                ..s.clone()
            });
        }
    }

    // Classes absent from the whole manifest are not balanced.
    let present: Vec<usize> = (0..Label::COUNT)
        .filter(|&c| manifest.counts()[c] > 0)
        .collect();
    let to_balance: Vec<Vec<Sample>> = present.iter().map(|&c| augmented[c].clone()).collect();
    let balanced_lists = oversample_balance(&to_balance, opts.seed)?;
    let mut balanced = vec![Vec::new(); Label::COUNT];
    for (&c, list) in present.iter().zip(balanced_lists) {
        balanced[c] = list;
    }
    Manifest::new(balanced.iter().flatten().cloned().collect())
        .write_csv(prep_dir.join("train.csv"))?;

    for (part, m) in [("val", &split.validation), ("test", &split.test)] {
        let mut out = Vec::with_capacity(m.len());
        for (i, s) in m.samples.iter().enumerate() {
            let img = read_rgb(Path::new(&s.image_path))?;
            let name = format!("{i:05}_{}.png", stem(&s.image_path));
            write_png(
                &resize_bilinear(&img, size, size)?,
                &prep_dir.join(part).join(&name),
            )?;
            out.push(Sample {
                image_path: format!("{part}/{name}"),
                ..s.clone()
            });
        }
        Manifest::new(out).write_csv(prep_dir.join(format!("{part}.csv")))?;
    }

    let (tr, va, te) = (
        split.train.counts(),
        split.validation.counts(),
        split.test.counts(),
    );
    let summary = PrepareSummary {
        seed: opts.seed,
        input_size: size,
        classes: Label::ALL
            .iter()
            .map(|&class| {
                let c = class.index();
                ClassCounts {
                    class,
                    training: tr[c],
                    validation: va[c],
                    testing: te[c],
                    augmented_training: augmented[c].len(),
                    balanced_training: balanced[c].len(),
                }
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&summary)?;
    let path = split_dir.join("summary.json");
    fs::write(&path, json).map_err(|e| DataError::io(&path, e))?;
    Ok(summary)
}

/// Images and labels held in memory as normalised tensors.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub inputs: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub paths: Vec<PathBuf>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, input: Tensor<f32>, label: usize, path: PathBuf) {
        self.inputs.push(input);
        self.labels.push(label);
        self.paths.push(path);
    }
}

/// Loads every image in a manifest, resizing to `input_size` when needed.
pub fn load_dataset(
    manifest_path: &Path,
    input_size: u32,
    norm: &Normalization,
) -> Result<Dataset> {
    let manifest = load_manifest(manifest_path)?;
    let mut cache: HashMap<PathBuf, Tensor<f32>> = HashMap::new();
    let mut ds = Dataset::default();
    for s in &manifest.samples {
        let path = resolve_path(manifest_path, &s.image_path);
        let tensor = match cache.get(&path) {
            Some(t) => t.clone(),
            None => {
                let img = read_rgb(&path)?;
                let img = resize_bilinear(&img, input_size, input_size)?;
                let t = normalize(&img, norm);
                cache.insert(path.clone(), t.clone());
                t
            }
        };
        ds.push(tensor, s.label.index(), path);
    }
    Ok(ds)
}

//! Visual explanations: LayerCAM class activation maps, guided
//! backpropagation, their fusion and heat-map overlays.
//!
//! All maps are taken with respect to the pre-softmax logit of the chosen
//! class.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use thiserror::Error;

use crate::datapipe::{normalize, resize_bilinear, resize_plane, DataError, Normalization};
use crate::network::{ModelGraph, NetworkError, ParamGrads};
use crate::tensor::{softmax, BackwardMode, Real, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("layer {layer} has no spatial extent")]
    NotSpatial { layer: usize },
    #[error("layer {layer} out of range for a {layers}-layer model")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {message}")]
    Output { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, ExplainError>;

/// Feature maps of one layer and the logit gradient with respect to them,
/// both `[K, h, w]`.
#[derive(Debug, Clone)]
pub struct Capture<T: Real> {
    pub layer: usize,
    pub features: Tensor<T>,
    pub grads: Tensor<T>,
}

/// Nonnegative class activation map at the resolution of its source layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub class: usize,
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Fused saliency at input resolution, min-max normalised to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Saliency {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Range of the product before normalisation.
    pub raw_min: f64,
    pub raw_max: f64,
}

fn check_target<T: Real>(model: &ModelGraph<T>, class: usize) -> Result<()> {
    let classes = model.config.num_classes;
    if class >= classes {
        return Err(ExplainError::ClassOutOfRange { class, classes });
    }
    Ok(())
}

/// Runs the model up to and including `layer`, then differentiates logit
/// `class` with respect to that layer's output.
pub fn capture<T: Real>(
    model: &ModelGraph<T>,
    input: &Tensor<T>,
    class: usize,
    layer: usize,
) -> Result<Capture<T>> {
    check_target(model, class)?;
    let layers = model.layers.len();
    if layer >= layers {
        return Err(ExplainError::LayerOutOfRange { layer, layers });
    }
    if !model.is_spatial(layer) {
        return Err(ExplainError::NotSpatial { layer });
    }
    let mut tape = Tape::new();
    let head = model.trace(&mut tape, input, false, ParamGrads::None)?;
    let features = tape.value(head.layer_outputs[layer]).clone();

    let mut tape = Tape::new();
    let a = tape.leaf(features.clone(), true);
    let tail = model.trace_from(&mut tape, a, layer + 1, ParamGrads::None)?;
    let score = tape.select(tail.logits, class)?;
    let mut grads = tape.backward(score, BackwardMode::Standard)?;
    let grads = grads
        .take(a)
        .unwrap_or_else(|| Tensor::zeros(features.shape()));
    Ok(Capture {
        layer,
        features,
        grads,
    })
}

/// `M = ReLU(sum_k ReLU(g_k) * A_k)` over the channel axis.
pub fn layercam_from<T: Real>(
    features: &Tensor<T>,
    grads: &Tensor<T>,
    class: usize,
    layer: usize,
) -> Result<ActivationMap> {
    let &[k, h, w] = features.shape() else {
        return Err(ExplainError::NotSpatial { layer });
    };
    if grads.shape() != features.shape() {
        return Err(ExplainError::SizeMismatch(format!(
            "features {:?} vs gradients {:?}",
            features.shape(),
            grads.shape()
        )));
    }
    let plane = h * w;
    let mut values = vec![0.0f64; plane];
    for c in 0..k {
        let a = &features.data()[c * plane..(c + 1) * plane];
        let g = &grads.data()[c * plane..(c + 1) * plane];
        for ((m, &a), &g) in values.iter_mut().zip(a).zip(g) {
            *m += g.to_f64_lossy().max(0.0) * a.to_f64_lossy();
        }
    }
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(ActivationMap {
        class,
        layer,
        height: h,
        width: w,
        values,
    })
}

pub fn layercam<T: Real>(
    model: &ModelGraph<T>,
    input: &Tensor<T>,
    class: usize,
    layer: usize,
) -> Result<ActivationMap> {
    let cap = capture(model, input, class, layer)?;
    layercam_from(&cap.features, &cap.grads, class, layer)
}

/// Input gradient of logit `class` where every ReLU passes gradient only if
/// both its forward input and the incoming gradient are positive.
pub fn guided_backprop<T: Real>(
    model: &ModelGraph<T>,
    input: &Tensor<T>,
    class: usize,
) -> Result<Tensor<T>> {
    check_target(model, class)?;
    let mut tape = Tape::new();
    let t = model.trace(&mut tape, input, true, ParamGrads::None)?;
    let score = tape.select(t.logits, class)?;
    let mut grads = tape.backward(score, BackwardMode::Guided)?;
    Ok(grads
        .take(t.input)
        .unwrap_or_else(|| Tensor::zeros(input.shape())))
}

/// Min-max normalisation; an all-zero input stays zero and a constant
/// nonzero input becomes all ones.
fn normalise(values: &mut [f64]) -> (f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    for v in values.iter_mut() {
        *v = if span > 0.0 {
            (*v - min) / span
        } else if max != 0.0 {
            1.0
        } else {
            0.0
        };
    }
    (min, max)
}

/// Upsamples `map` to the gradient image's resolution and multiplies it by the
/// channel-wise maximum of the positive part of `gbp` (`[C, H, W]`).
pub fn fuse<T: Real>(map: &ActivationMap, gbp: &Tensor<T>) -> Result<Saliency> {
    let &[c, h, w] = gbp.shape() else {
        return Err(ExplainError::SizeMismatch(format!(
            "gradient image {:?} is not [C, H, W]",
            gbp.shape()
        )));
    };
    let up = resize_plane(&map.values, map.height, map.width, h, w)?;
    if up.len() != h * w {
        return Err(ExplainError::SizeMismatch(format!(
            "upsampled map has {} pixels, want {}",
            up.len(),
            h * w
        )));
    }
    let plane = h * w;
    let mut values: Vec<f64> = (0..plane)
        .map(|i| {
            let g = (0..c)
                .map(|ch| gbp.data()[ch * plane + i].to_f64_lossy().max(0.0))
                .fold(0.0, f64::max);
            up[i] * g
        })
        .collect();
    let (raw_min, raw_max) = normalise(&mut values);
    Ok(Saliency {
        height: h,
        width: w,
        values,
        raw_min,
        raw_max,
    })
}

/// Blue (0) to green (0.5) to red (1), linear between the stops.
pub fn colormap(s: f64) -> [f64; 3] {
    let s = s.clamp(0.0, 1.0);
    if s <= 0.5 {
        [0.0, 2.0 * s, 1.0 - 2.0 * s]
    } else {
        [2.0 * s - 1.0, 2.0 - 2.0 * s, 0.0]
    }
}

/// Alpha-blends the colour-mapped saliency over `image`.
pub fn render_overlay(image: &RgbImage, saliency: &Saliency, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ExplainError::BadAlpha(alpha));
    }
    let (w, h) = image.dimensions();
    if (h as usize, w as usize) != (saliency.height, saliency.width) {
        return Err(ExplainError::SizeMismatch(format!(
            "image {h}x{w} vs saliency {}x{}",
            saliency.height, saliency.width
        )));
    }
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let color = colormap(saliency.values[y as usize * saliency.width + x as usize]);
        let src = image.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|i| {
            ((1.0 - alpha) * f64::from(src[i]) + alpha * 255.0 * color[i]).round() as u8
        }))
    }))
}

fn gray(values: &[f64], height: usize, width: usize) -> GrayImage {
    let max = values.iter().copied().fold(0.0, f64::max);
    GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let v = values[y as usize * width + x as usize];
        let s = if max > 0.0 { v / max } else { 0.0 };
        Luma([(255.0 * s).round() as u8])
    })
}

/// Everything derived from explaining one image.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub class: usize,
    pub probabilities: Vec<f64>,
    pub map: ActivationMap,
    pub saliency: Saliency,
    /// Overlay at the model's input resolution.
    pub overlay: RgbImage,
}

/// Resizes `image` to the model input and explains `class` at `layer`; with
/// `class == None` the predicted class is explained.
pub fn explain_image(
    model: &ModelGraph<f32>,
    image: &RgbImage,
    norm: &Normalization,
    class: Option<usize>,
    layer: usize,
    alpha: f64,
) -> Result<Explanation> {
    let size = model.config.input_size as u32;
    let resized = resize_bilinear(image, size, size)?;
    let input = normalize(&resized, norm);
    let logits = model.logits(&input)?;
    let probabilities: Vec<f64> = softmax(logits.data())
        .iter()
        .map(|&p| f64::from(p))
        .collect();
    let class = class.unwrap_or_else(|| logits.argmax());
    let map = layercam(model, &input, class, layer)?;
    let gbp = guided_backprop(model, &input, class)?;
    let saliency = fuse(&map, &gbp)?;
    let overlay = render_overlay(&resized, &saliency, alpha)?;
    Ok(Explanation {
        class,
        probabilities,
        map,
        saliency,
        overlay,
    })
}

/// Paths written by [`write_outputs`].
#[derive(Debug, Clone)]
pub struct ExplainFiles {
    pub cam_png: PathBuf,
    pub cam_csv: PathBuf,
    pub saliency_png: PathBuf,
    pub overlay_png: PathBuf,
}

fn save(img_result: image::ImageResult<()>, path: &Path) -> Result<()> {
    img_result.map_err(|e| ExplainError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes the raw map (PNG scaled by its maximum, and CSV of raw values),
/// the fused saliency and the overlay. File names are
/// `{image_id}_c{class}_l{layer}_{kind}.{ext}`.
pub fn write_outputs(
    out_dir: &Path,
    image_id: &str,
    map: &ActivationMap,
    saliency: &Saliency,
    overlay: &RgbImage,
) -> Result<ExplainFiles> {
    fs::create_dir_all(out_dir).map_err(|e| ExplainError::Output {
        path: out_dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let stem = format!("{image_id}_c{}_l{}", map.class, map.layer);
    let files = ExplainFiles {
        cam_png: out_dir.join(format!("{stem}_cam.png")),
        cam_csv: out_dir.join(format!("{stem}_cam.csv")),
        saliency_png: out_dir.join(format!("{stem}_saliency.png")),
        overlay_png: out_dir.join(format!("{stem}_overlay.png")),
    };
    save(
        gray(&map.values, map.height, map.width).save(&files.cam_png),
        &files.cam_png,
    )?;
    let csv: String = map
        .values
        .chunks(map.width)
        .map(|row| {
            row.iter()
                .map(|v| format!("{v:e}"))
                .collect::<Vec<_>>()
                .join(",")
                + "\n"
        })
        .collect();
    fs::write(&files.cam_csv, csv).map_err(|e| ExplainError::Output {
        path: files.cam_csv.clone(),
        message: e.to_string(),
    })?;
    save(
        gray(&saliency.values, saliency.height, saliency.width).save(&files.saliency_png),
        &files.saliency_png,
    )?;
    save(overlay.save(&files.overlay_png), &files.overlay_png)?;
    Ok(files)
}

//! VGG-style classifiers at two scales, transfer-learning surgery, and
//! checkpoint persistence.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{NodeId, Real, Tape, Tensor, TensorError};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, read_checkpoint, save_checkpoint, write_checkpoint,
};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("freeze_blocks {requested} out of range (model has {available} conv blocks)")]
    FreezeOutOfRange { requested: usize, available: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("checkpoint payload length {found} bytes, header declares {expected}")]
    PayloadLength { expected: usize, found: usize },
    #[error("checkpoint layer {layer} is `{found}`, config expects `{expected}`")]
    ShapeMismatch {
        layer: usize,
        expected: String,
        found: String,
    },
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 13 conv + 3 linear layers with the canonical VGG16 widths.
    Vgg16Shape,
    /// 4 single-conv blocks (8/16/32/64 channels) + 2 linear layers.
    VggTiny,
}

impl Preset {
    pub fn default_input_size(self) -> usize {
        match self {
            Preset::Vgg16Shape => 224,
            Preset::VggTiny => 64,
        }
    }

    fn blocks(self) -> &'static [&'static [usize]] {
        match self {
            Preset::Vgg16Shape => &[
                &[64, 64],
                &[128, 128],
                &[256, 256, 256],
                &[512, 512, 512],
                &[512, 512, 512],
            ],
            Preset::VggTiny => &[&[8], &[16], &[32], &[64]],
        }
    }

    fn hidden_widths(self) -> &'static [usize] {
        match self {
            Preset::Vgg16Shape => &[4096, 4096],
            Preset::VggTiny => &[128],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Vgg16Shape => "vgg16_shape",
            Preset::VggTiny => "vgg_tiny",
        })
    }
}

impl FromStr for Preset {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg16_shape" => Ok(Preset::Vgg16Shape),
            "vgg_tiny" => Ok(Preset::VggTiny),
            other => Err(NetworkError::InvalidConfig(format!(
                "unknown preset `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub input_size: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(preset: Preset, num_classes: usize) -> Self {
        ModelConfig {
            preset,
            input_size: preset.default_input_size(),
            num_classes,
        }
    }

    pub fn with_input_size(mut self, input_size: usize) -> Self {
        self.input_size = input_size;
        self
    }

    /// Expands the preset into its layer list.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        if self.num_classes < 2 {
            return Err(NetworkError::InvalidConfig(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        let blocks = self.preset.blocks();
        let reduction = 1usize << blocks.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(reduction) {
            return Err(NetworkError::InvalidConfig(format!(
                "input size {} is incompatible with {} 2x2 poolings",
                self.input_size,
                blocks.len()
            )));
        }
        let mut specs = Vec::new();
        let mut channels = 3;
        for (b, widths) in blocks.iter().enumerate() {
            for &w in widths.iter() {
                specs.push(LayerSpec::new(
                    LayerKind::Conv {
                        in_channels: channels,
                        out_channels: w,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    },
                    Some(b),
                ));
                specs.push(LayerSpec::new(LayerKind::Relu, Some(b)));
                channels = w;
            }
            specs.push(LayerSpec::new(
                LayerKind::MaxPool {
                    kernel: 2,
                    stride: 2,
                },
                Some(b),
            ));
        }
        specs.push(LayerSpec::new(LayerKind::Flatten, None));
        let side = self.input_size / reduction;
        let mut features = channels * side * side;
        for &h in self.preset.hidden_widths() {
            specs.push(LayerSpec::new(
                LayerKind::Linear {
                    in_features: features,
                    out_features: h,
                },
                None,
            ));
            specs.push(LayerSpec::new(LayerKind::Relu, None));
            features = h;
        }
        specs.push(LayerSpec::new(
            LayerKind::Linear {
                in_features: features,
                out_features: self.num_classes,
            },
            None,
        ));
        Ok(specs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerKind {
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            LayerKind::Linear { in_features, .. } => in_features,
            _ => 0,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(
                f,
                "conv in={in_channels} out={out_channels} k={kernel} s={stride} p={padding}"
            ),
            LayerKind::Relu => f.write_str("relu"),
            LayerKind::MaxPool { kernel, stride } => write!(f, "maxpool k={kernel} s={stride}"),
            LayerKind::Flatten => f.write_str("flatten"),
            LayerKind::Linear {
                in_features,
                out_features,
            } => write!(f, "linear in={in_features} out={out_features}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Conv block the layer belongs to; `None` for the classifier.
    pub block: Option<usize>,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, block: Option<usize>) -> Self {
        LayerSpec {
            kind,
            block,
            trainable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Real> {
    pub spec: LayerSpec,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> Layer<T> {
    fn has_params(&self) -> bool {
        self.weight.is_some()
    }
}

/// Which parameters get gradients during [`ModelGraph::trace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGrads {
    None,
    Trainable,
    All,
}

/// Node ids recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: NodeId,
    /// Output node of every layer, in layer order.
    pub layer_outputs: Vec<NodeId>,
    /// `(weight, bias)` leaves for parameterised layers.
    pub params: Vec<Option<(NodeId, NodeId)>>,
    pub logits: NodeId,
}

/// An ordered layer list with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T: Real = f32> {
    pub config: ModelConfig,
    pub layers: Vec<Layer<T>>,
    pub seed: u64,
    pub epoch: u64,
}

/// Weights from `U(-b, b)`, zero bias. Hidden layers are Kaiming-uniform
/// (`b = sqrt(6 / fan_in)`). The classification head uses a fixed standard
/// deviation of 0.01 so a fresh head starts with a near-uniform softmax.
fn init_params<T: Real>(
    kind: &LayerKind,
    head: bool,
    rng: &mut ChaCha8Rng,
) -> Option<(Tensor<T>, Tensor<T>)> {
    let (ws, bs) = kind.param_shapes()?;
    let bound = if head {
        0.01 * 3f64.sqrt()
    } else {
        (6.0 / kind.fan_in() as f64).sqrt()
    };
    let numel: usize = ws.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect();
    Some((
        Tensor::new(ws, data).expect("weight shape"),
        Tensor::zeros(bs),
    ))
}

pub fn build_model<T: Real>(config: ModelConfig, seed: u64) -> Result<ModelGraph<T>> {
    let specs = config.layer_specs()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = specs.len() - 1;
    let layers = specs
        .into_iter()
        .enumerate()
        .map(|(i, spec)| {
            let params = init_params(&spec.kind, i == last, &mut rng);
            let (weight, bias) = params.map_or((None, None), |(w, b)| (Some(w), Some(b)));
            Layer { spec, weight, bias }
        })
        .collect();
    Ok(ModelGraph {
        config,
        layers,
        seed,
        epoch: 0,
    })
}

impl<T: Real> ModelGraph<T> {
    pub fn from_layers(
        config: ModelConfig,
        layers: Vec<Layer<T>>,
        seed: u64,
        epoch: u64,
    ) -> Result<Self> {
        check_composition(config.input_size, layers.iter().map(|l| &l.spec))?;
        for (i, layer) in layers.iter().enumerate() {
            match (layer.spec.kind.param_shapes(), &layer.weight, &layer.bias) {
                (Some((ws, bs)), Some(w), Some(b)) if w.shape() == ws && b.shape() == bs => {}
                (None, None, None) => {}
                _ => {
                    return Err(NetworkError::InvalidConfig(format!(
                        "layer {i} parameters do not match `{}`",
                        layer.spec.kind
                    )))
                }
            }
        }
        Ok(ModelGraph {
            config,
            layers,
            seed,
            epoch,
        })
    }

    pub fn num_conv_blocks(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.spec.block)
            .max()
            .map_or(0, |b| b + 1)
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.spec.kind, LayerKind::Conv { .. }))
            .count()
    }

    pub fn linear_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.spec.kind, LayerKind::Linear { .. }))
            .count()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| Some(l.weight.as_ref()?.numel() + l.bias.as_ref()?.numel()))
            .sum()
    }

    /// Index of the ReLU following the last conv layer, i.e. the final
    /// spatial activation before the last pooling.
    pub fn default_explain_layer(&self) -> usize {
        let last_conv = self
            .layers
            .iter()
            .rposition(|l| matches!(l.spec.kind, LayerKind::Conv { .. }))
            .expect("presets have conv layers");
        match self.layers.get(last_conv + 1) {
            Some(l) if l.spec.kind == LayerKind::Relu => last_conv + 1,
            _ => last_conv,
        }
    }

    /// Whether the output of `layer` still has spatial extent.
    pub fn is_spatial(&self, layer: usize) -> bool {
        layer < self.layers.len()
            && self.layers[..=layer]
                .iter()
                .all(|l| l.spec.kind != LayerKind::Flatten)
    }

    /// Parameters in layer order as `(layer index, weight, bias)`.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| Some((i, l.weight.as_ref()?, l.bias.as_ref()?)))
    }

    /// Mutable trainable tensors in a stable order (weight then bias per layer).
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .filter(|l| l.spec.trainable)
            .flat_map(|l| [l.weight.as_mut(), l.bias.as_mut()])
            .flatten()
            .collect()
    }

    pub fn trainable_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.trainable && l.has_params())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ModelGraph<U> {
        ModelGraph {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    weight: l.weight.as_ref().map(Tensor::cast),
                    bias: l.bias.as_ref().map(Tensor::cast),
                })
                .collect(),
            seed: self.seed,
            epoch: self.epoch,
        }
    }

    /// Records a full forward pass on `tape`.
    pub fn trace(
        &self,
        tape: &mut Tape<T>,
        input: &Tensor<T>,
        input_grad: bool,
        param_grads: ParamGrads,
    ) -> Result<ForwardTrace> {
        let s = self.config.input_size;
        if input.shape() != [3, s, s] {
            return Err(NetworkError::Tensor(TensorError::dim(
                "forward",
                "input",
                format!("expected [3, {s}, {s}], got {:?}", input.shape()),
            )));
        }
        let input_node = tape.leaf(input.clone(), input_grad);
        self.trace_from(tape, input_node, 0, param_grads)
    }

    /// Runs layers `start..` on an existing node holding the output of layer
    /// `start - 1` (or the image when `start == 0`).
    pub fn trace_from(
        &self,
        tape: &mut Tape<T>,
        start_node: NodeId,
        start: usize,
        param_grads: ParamGrads,
    ) -> Result<ForwardTrace> {
        let params = self.param_leaves(tape, start, param_grads);
        self.trace_with(tape, start_node, start, &params)
    }

    /// Puts the parameters of layers `start..` on `tape`, one entry per layer.
    /// The leaves can be shared by several [`ModelGraph::trace_with`] calls.
    pub fn param_leaves(
        &self,
        tape: &mut Tape<T>,
        start: usize,
        param_grads: ParamGrads,
    ) -> Vec<Option<(NodeId, NodeId)>> {
        self.layers[start..]
            .iter()
            .map(|layer| {
                let wants = match param_grads {
                    ParamGrads::None => false,
                    ParamGrads::Trainable => layer.spec.trainable,
                    ParamGrads::All => true,
                };
                match (&layer.weight, &layer.bias) {
                    (Some(w), Some(b)) => {
                        Some((tape.leaf(w.clone(), wants), tape.leaf(b.clone(), wants)))
                    }
                    _ => None,
                }
            })
            .collect()
    }

    /// Like [`ModelGraph::trace_from`] with parameter leaves from
    /// [`ModelGraph::param_leaves`].
    pub fn trace_with(
        &self,
        tape: &mut Tape<T>,
        start_node: NodeId,
        start: usize,
        params: &[Option<(NodeId, NodeId)>],
    ) -> Result<ForwardTrace> {
        if params.len() != self.layers.len() - start {
            return Err(NetworkError::InvalidConfig(format!(
                "{} parameter entries for {} layers",
                params.len(),
                self.layers.len() - start
            )));
        }
        let mut x = start_node;
        let mut layer_outputs = Vec::with_capacity(params.len());
        for (layer, &leaves) in self.layers[start..].iter().zip(params) {
            x = match (layer.spec.kind, leaves) {
                (
                    LayerKind::Conv {
                        stride, padding, ..
                    },
                    Some((w, b)),
                ) => tape.conv2d(x, w, b, stride, padding)?,
                (LayerKind::Relu, _) => tape.relu(x),
                (LayerKind::MaxPool { kernel, stride }, _) => tape.maxpool2d(x, kernel, stride)?,
                (LayerKind::Flatten, _) => tape.flatten(x),
                (LayerKind::Linear { .. }, Some((w, b))) => tape.linear(x, w, b)?,
                (kind, _) => {
                    return Err(NetworkError::InvalidConfig(format!(
                        "layer `{kind}` is missing parameters"
                    )))
                }
            };
            if !tape.value(x).is_finite() {
                return Err(NetworkError::Tensor(TensorError::NonFinite("forward")));
            }
            layer_outputs.push(x);
        }
        Ok(ForwardTrace {
            input: start_node,
            layer_outputs,
            params: params.to_vec(),
            logits: x,
        })
    }

    /// Inference-only forward pass.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let trace = self.trace(&mut tape, input, false, ParamGrads::None)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Freezes the first `freeze_blocks` conv blocks and swaps the final
    /// linear layer for a freshly initialised `num_classes`-wide head.
    pub fn finetune_surgery(
        mut self,
        freeze_blocks: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let available = self.num_conv_blocks();
        if freeze_blocks > available {
            return Err(NetworkError::FreezeOutOfRange {
                requested: freeze_blocks,
                available,
            });
        }
        if num_classes < 2 {
            return Err(NetworkError::InvalidConfig(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        for layer in &mut self.layers {
            layer.spec.trainable = layer.spec.block.is_none_or(|b| b >= freeze_blocks);
        }
        let head = self.layers.last_mut().expect("non-empty model");
        let LayerKind::Linear { in_features, .. } = head.spec.kind else {
            return Err(NetworkError::InvalidConfig(
                "final layer is not linear".into(),
            ));
        };
        head.spec.kind = LayerKind::Linear {
            in_features,
            out_features: num_classes,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, b) = init_params(&head.spec.kind, true, &mut rng).expect("linear has params");
        head.weight = Some(w);
        head.bias = Some(b);
        head.spec.trainable = true;
        self.config.num_classes = num_classes;
        self.epoch = 0;
        Ok(self)
    }
}

/// Verifies that consecutive layers compose for a square RGB input.
pub(crate) fn check_composition<'a>(
    input_size: usize,
    specs: impl Iterator<Item = &'a LayerSpec>,
) -> Result<()> {
    let mut shape = vec![3, input_size, input_size];
    for (i, spec) in specs.enumerate() {
        let bad = |why: String| {
            NetworkError::InvalidConfig(format!("layer {i} (`{}`): {why}", spec.kind))
        };
        shape = match spec.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = shape[..] else {
                    return Err(bad(format!("input {shape:?} is not spatial")));
                };
                if c != in_channels {
                    return Err(bad(format!("receives {c} channels")));
                }
                if stride == 0
                    || (h + 2 * padding) < kernel
                    || (h + 2 * padding - kernel) % stride != 0
                {
                    return Err(bad(format!("does not fit {h}x{w}")));
                }
                let o = |n: usize| (n + 2 * padding - kernel) / stride + 1;
                vec![out_channels, o(h), o(w)]
            }
            LayerKind::Relu => shape,
            LayerKind::MaxPool { kernel, stride } => {
                let [c, h, w] = shape[..] else {
                    return Err(bad(format!("input {shape:?} is not spatial")));
                };
                if kernel == 0
                    || stride == 0
                    || h < kernel
                    || (h - kernel) % stride != 0
                    || (w - kernel) % stride != 0
                {
                    return Err(bad(format!("window does not tile {h}x{w}")));
                }
                vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
            }
            LayerKind::Flatten => vec![shape.iter().product()],
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                if shape != [in_features] {
                    return Err(bad(format!("receives {shape:?}")));
                }
                vec![out_features]
            }
        };
    }
    if shape.len() != 1 {
        return Err(NetworkError::InvalidConfig(format!(
            "model output {shape:?} is not a logit vector"
        )));
    }
    Ok(())
}

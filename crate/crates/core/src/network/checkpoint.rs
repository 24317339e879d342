//! Checkpoint files: an 8-byte magic, a little-endian `u32` header length,
//! a UTF-8 text header, then every parameter array as little-endian `f32`
//! in layer order (weight before bias).
//!
//! Header lines:
//!
//! ```text
//! format woundstage-checkpoint 1
//! preset vgg_tiny
//! input_size 64
//! num_classes 6
//! seed 7
//! epoch 12
//! layer 0 block=0 trainable=1 conv in=3 out=8 k=3 s=1 p=1
//! param 0 weight 8x3x3x3
//! param 0 bias 8
//! ...
//! ```

use std::fs;
use std::path::Path;

use super::{
    check_composition, Layer, LayerKind, LayerSpec, ModelConfig, ModelGraph, NetworkError, Preset,
    Result,
};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"WSTGCKPT";
const FORMAT_LINE: &str = "format woundstage-checkpoint 1";

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn encode_header(model: &ModelGraph<f32>) -> String {
    let mut h = String::new();
    let c = &model.config;
    h.push_str(FORMAT_LINE);
    h.push('\n');
    h.push_str(&format!(
        "preset {}\ninput_size {}\nnum_classes {}\nseed {}\nepoch {}\n",
        c.preset, c.input_size, c.num_classes, model.seed, model.epoch
    ));
    for (i, layer) in model.layers.iter().enumerate() {
        let block = layer
            .spec
            .block
            .map_or_else(|| "-".to_string(), |b| b.to_string());
        h.push_str(&format!(
            "layer {i} block={block} trainable={} {}\n",
            u8::from(layer.spec.trainable),
            layer.spec.kind
        ));
    }
    for (i, w, b) in model.params() {
        h.push_str(&format!("param {i} weight {}\n", shape_str(w.shape())));
        h.push_str(&format!("param {i} bias {}\n", shape_str(b.shape())));
    }
    h
}

/// Serialises a model to bytes.
pub fn write_checkpoint(model: &ModelGraph<f32>) -> Vec<u8> {
    let header = encode_header(model);
    let payload_len: usize = model
        .params()
        .map(|(_, w, b)| 4 * (w.numel() + b.numel()))
        .sum();
    let mut out = Vec::with_capacity(12 + header.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (_, w, b) in model.params() {
        for v in w.data().iter().chain(b.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &ModelGraph<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(model))?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> NetworkError {
    NetworkError::CorruptHeader(msg.into())
}

fn kv<'a>(parts: &[&'a str], key: &str) -> Result<&'a str> {
    parts
        .iter()
        .find_map(|p| p.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| corrupt(format!("missing `{key}=`")))
}

fn num(s: &str) -> Result<usize> {
    s.parse().map_err(|_| corrupt(format!("bad number `{s}`")))
}

fn parse_layer(line: &str) -> Result<(usize, LayerSpec)> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() < 5 || parts[0] != "layer" {
        return Err(corrupt(format!("bad layer line `{line}`")));
    }
    let idx = num(parts[1])?;
    let block = match kv(&parts, "block")? {
        "-" => None,
        b => Some(num(b)?),
    };
    let trainable = match kv(&parts, "trainable")? {
        "1" => true,
        "0" => false,
        other => return Err(corrupt(format!("bad trainable flag `{other}`"))),
    };
    let rest = &parts[5..];
    let kind = match parts[4] {
        "conv" => LayerKind::Conv {
            in_channels: num(kv(rest, "in")?)?,
            out_channels: num(kv(rest, "out")?)?,
            kernel: num(kv(rest, "k")?)?,
            stride: num(kv(rest, "s")?)?,
            padding: num(kv(rest, "p")?)?,
        },
        "relu" => LayerKind::Relu,
        "maxpool" => LayerKind::MaxPool {
            kernel: num(kv(rest, "k")?)?,
            stride: num(kv(rest, "s")?)?,
        },
        "flatten" => LayerKind::Flatten,
        "linear" => LayerKind::Linear {
            in_features: num(kv(rest, "in")?)?,
            out_features: num(kv(rest, "out")?)?,
        },
        other => return Err(corrupt(format!("unknown layer kind `{other}`"))),
    };
    Ok((
        idx,
        LayerSpec {
            kind,
            block,
            trainable,
        },
    ))
}

/// Parses checkpoint bytes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelGraph<f32>> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic bytes"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header =
        std::str::from_utf8(&bytes[12..header_end]).map_err(|_| corrupt("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some(FORMAT_LINE) {
        return Err(corrupt("unsupported format line"));
    }
    let mut field = |name: &str| -> Result<&str> {
        let line = lines
            .next()
            .ok_or_else(|| corrupt(format!("missing `{name}`")))?;
        line.strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| corrupt(format!("expected `{name}`, got `{line}`")))
    };
    let preset: Preset = field("preset")?
        .parse()
        .map_err(|_| corrupt("unknown preset"))?;
    let input_size = num(field("input_size")?)?;
    let num_classes = num(field("num_classes")?)?;
    let seed = field("seed")?.parse().map_err(|_| corrupt("bad seed"))?;
    let epoch = field("epoch")?.parse().map_err(|_| corrupt("bad epoch"))?;

    let mut specs = Vec::new();
    let mut declared = Vec::new();
    for line in lines {
        if line.starts_with("layer ") {
            let (idx, spec) = parse_layer(line)?;
            if idx != specs.len() {
                return Err(corrupt(format!("layer {idx} out of order")));
            }
            specs.push(spec);
        } else if let Some(rest) = line.strip_prefix("param ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            let [idx, _, shape] = parts[..] else {
                return Err(corrupt(format!("bad param line `{line}`")));
            };
            let shape: Vec<usize> = shape.split('x').map(num).collect::<Result<_>>()?;
            declared.push((num(idx)?, shape));
        } else if !line.is_empty() {
            return Err(corrupt(format!("unexpected line `{line}`")));
        }
    }
    check_composition(input_size, specs.iter()).map_err(|e| corrupt(e.to_string()))?;

    let expected: Vec<(usize, Vec<usize>)> = specs
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.kind.param_shapes().map(|(w, b)| [(i, w), (i, b)]))
        .flatten()
        .collect();
    if expected != declared {
        return Err(corrupt("param table disagrees with layer list"));
    }
    let payload = &bytes[header_end..];
    let want: usize = expected
        .iter()
        .map(|(_, s)| 4 * s.iter().product::<usize>())
        .sum();
    if payload.len() != want {
        return Err(NetworkError::PayloadLength {
            expected: want,
            found: payload.len(),
        });
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut take = |shape: Vec<usize>| -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape, floats.by_ref().take(n).collect()).expect("payload length checked")
    };
    let layers = specs
        .into_iter()
        .map(|spec| {
            let (weight, bias) = match spec.kind.param_shapes() {
                Some((w, b)) => (Some(take(w)), Some(take(b))),
                None => (None, None),
            };
            Layer { spec, weight, bias }
        })
        .collect();
    let config = ModelConfig {
        preset,
        input_size,
        num_classes,
    };
    ModelGraph::from_layers(config, layers, seed, epoch)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelGraph<f32>> {
    read_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and checks that its layers match `config`, naming the
/// first layer that differs.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    config: &ModelConfig,
) -> Result<ModelGraph<f32>> {
    let model = load_checkpoint(path)?;
    let expected = config.layer_specs()?;
    let found: Vec<_> = model.layers.iter().map(|l| l.spec.kind).collect();
    for i in 0..expected.len().max(found.len()) {
        let e = expected.get(i).map(|s| s.kind);
        let f = found.get(i).copied();
        if e != f {
            let show =
                |k: Option<LayerKind>| k.map_or_else(|| "<none>".to_string(), |k| k.to_string());
            return Err(NetworkError::ShapeMismatch {
                layer: i,
                expected: show(e),
                found: show(f),
            });
        }
    }
    Ok(model)
}

//! Mini-batch training with Adam, per-epoch validation and best-checkpoint
//! selection, plus held-out evaluation.

mod metrics;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{macro_auc, mann_whitney_u2, roc_auc, EvalReport, MetricError};

use crate::datapipe::Dataset;
use crate::network::{ModelGraph, NetworkError, ParamGrads};
use crate::tensor::{
    softmax, BackwardMode, OptimizerKind, OptimizerState, Tape, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperParams(String),
    #[error("label {label} does not fit a {classes}-way head")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TrainError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Conv blocks kept frozen when fine-tuning from a pretrained model.
    pub freeze_blocks: usize,
    pub optimizer: OptimizerKind,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            learning_rate: 1e-4,
            epochs: 40,
            batch_size: 16,
            seed: 0,
            freeze_blocks: 3,
            optimizer: OptimizerKind::default(),
        }
    }
}

impl HyperParams {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidHyperParams(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidHyperParams(
                "batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Validation metrics are absent when no validation set was given.
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc,val_auc\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{:.6},{:.6},{},{},{}\n",
                r.epoch,
                r.train_loss,
                r.train_acc,
                opt(r.val_loss),
                opt(r.val_acc),
                opt(r.val_auc)
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| TrainError::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy (ties go
    /// to the lower validation loss, then the earlier epoch). Without a
    /// validation set this is the final model.
    pub best: ModelGraph<f32>,
    pub best_epoch: Option<usize>,
    pub last: ModelGraph<f32>,
    pub history: History,
}

fn check_labels(ds: &Dataset, classes: usize) -> Result<()> {
    match ds.labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(TrainError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Index of the first layer with trainable parameters. Layers before it are
/// a fixed feature extractor.
fn frozen_prefix(model: &ModelGraph<f32>) -> usize {
    model
        .trainable_layer_indices()
        .first()
        .copied()
        .unwrap_or(model.layers.len())
}

/// Output of the frozen prefix for every input.
fn prefix_features(
    model: &ModelGraph<f32>,
    ds: &Dataset,
    start: usize,
) -> Result<Vec<Tensor<f32>>> {
    if start == 0 {
        return Ok(ds.inputs.clone());
    }
    let mut prefix = model.clone();
    prefix.layers.truncate(start);
    ds.inputs
        .iter()
        .map(|x| {
            let mut tape = Tape::new();
            let t = prefix.trace(&mut tape, x, false, ParamGrads::None)?;
            Ok(tape.value(t.logits).clone())
        })
        .collect()
}

/// Loss and class probabilities of every sample, without gradients.
fn predict_from(
    model: &ModelGraph<f32>,
    features: &[Tensor<f32>],
    start: usize,
) -> Result<Vec<Vec<f64>>> {
    features
        .iter()
        .map(|f| {
            let mut tape = Tape::new();
            let node = tape.leaf(f.clone(), false);
            let t = model.trace_from(&mut tape, node, start, ParamGrads::None)?;
            let logits: Vec<f64> = tape
                .value(t.logits)
                .data()
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            Ok(softmax(&logits))
        })
        .collect()
}

fn mean_xent(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| -p[l].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / labels.len() as f64
}

/// Softmax class probabilities for each input.
pub fn predict(model: &ModelGraph<f32>, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    predict_from(model, &ds.inputs, 0)
}

/// Confusion matrix, per-class accuracy and macro AUC on `ds`.
pub fn evaluate(
    model: &ModelGraph<f32>,
    ds: &Dataset,
    class_names: &[String],
) -> Result<EvalReport> {
    check_labels(ds, model.config.num_classes)?;
    let probs = predict(model, ds)?;
    Ok(EvalReport::from_scores(&probs, &ds.labels, class_names)?)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    let mut f = fs::File::create(path).map_err(|e| TrainError::io(path, e))?;
    writeln!(f, "{json}").map_err(|e| TrainError::io(path, e))
}

fn better(acc: f64, loss: f64, best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((best_acc, best_loss)) => acc > best_acc || (acc == best_acc && loss < best_loss),
    }
}

/// Trains the trainable layers of `model` on `train`.
///
/// Each epoch visits the training set in a fresh order drawn from
/// `seed + epoch`; the final partial batch is kept. Gradients are averaged
/// over the batch before one optimiser step. With `epochs == 0` the model is
/// returned untouched with an empty history.
pub fn train(
    model: ModelGraph<f32>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    hp: &HyperParams,
) -> Result<TrainOutcome> {
    hp.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let classes = model.config.num_classes;
    check_labels(train_set, classes)?;
    let val_set = val_set.filter(|v| !v.is_empty());
    if let Some(v) = val_set {
        check_labels(v, classes)?;
    }

    let mut model = model;
    let start = frozen_prefix(&model);
    let train_features = prefix_features(&model, train_set, start)?;
    let val_features = val_set
        .map(|v| prefix_features(&model, v, start))
        .transpose()?;

    let mut optimizer = OptimizerState::new(hp.learning_rate, hp.optimizer);
    let trainable = model.trainable_layer_indices();
    let mut history = History::default();
    let mut best: Option<(f64, f64)> = None;
    let mut best_model = model.clone();
    let mut best_epoch = None;

    for epoch in 1..=hp.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            hp.seed.wrapping_add(epoch as u64),
        ));

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(hp.batch_size) {
            // One tape per batch: the parameter leaves are shared and their
            // gradients accumulate over the batch's samples.
            let mut tape = Tape::new();
            let leaves = model.param_leaves(&mut tape, start, ParamGrads::Trainable);
            let mut total = None;
            for &i in batch {
                let node = tape.leaf(train_features[i].clone(), false);
                let t = model.trace_with(&mut tape, node, start, &leaves)?;
                if tape.value(t.logits).argmax() == train_set.labels[i] {
                    correct += 1;
                }
                let loss = tape.softmax_cross_entropy(t.logits, train_set.labels[i])?;
                loss_sum += f64::from(tape.value(loss).data()[0]);
                total = Some(match total {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let mean = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f32);
            let mut g = tape.backward(mean, BackwardMode::Standard)?;
            let mut grads = Vec::with_capacity(2 * trainable.len());
            for &layer in &trainable {
                let (w, b) = leaves[layer - start].expect("trainable layer has params");
                for node in [w, b] {
                    let like = tape.value(node);
                    grads.push(g.take(node).unwrap_or_else(|| Tensor::zeros(like.shape())));
                }
            }
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            optimizer.step(&mut model.trainable_params_mut(), &grad_refs)?;
        }
        model.epoch += 1;

        let n = train_set.len() as f64;
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss: None,
            val_acc: None,
            val_auc: None,
        };
        if let (Some(v), Some(vf)) = (val_set, &val_features) {
            let probs = predict_from(&model, vf, start)?;
            let names: Vec<String> = (0..classes).map(|c| c.to_string()).collect();
            let report = EvalReport::from_scores(&probs, &v.labels, &names)?;
            let loss = mean_xent(&probs, &v.labels);
            record.val_loss = Some(loss);
            record.val_acc = Some(report.overall_acc);
            record.val_auc = report.macro_auc;
            if better(report.overall_acc, loss, best) {
                best = Some((report.overall_acc, loss));
                best_model = model.clone();
                best_epoch = Some(epoch);
            }
        }
        info!(
            "epoch {epoch}/{}: train_loss={:.4} train_acc={:.3} val_loss={} val_acc={} val_auc={}",
            hp.epochs,
            record.train_loss,
            record.train_acc,
            opt(record.val_loss),
            opt(record.val_acc),
            opt(record.val_auc)
        );
        history.epochs.push(record);
    }
    if val_set.is_none() {
        best_model = model.clone();
    }
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        last: model,
        history,
    })
}

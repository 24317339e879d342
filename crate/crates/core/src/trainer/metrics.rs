//! Classification metrics: tie-aware ROC AUC via the Mann–Whitney statistic,
//! confusion matrix and per-class accuracy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("AUC undefined: need at least one positive and one negative ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score")]
    NonFinite,
    #[error("empty evaluation set")]
    Empty,
}

/// Twice the Mann–Whitney U of the positives: each (positive, negative) pair
/// contributes 2 when the positive scores higher and 1 on a tie.
///
/// Returns `(u2, positives, negatives)`.
pub fn mann_whitney_u2(
    scores: &[f64],
    labels: &[bool],
) -> Result<(u64, usize, usize), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut u2 = 0u64;
    let mut negatives_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos_here = group.iter().filter(|&&k| labels[k]).count() as u64;
        let neg_here = group.len() as u64 - pos_here;
        u2 += pos_here * (2 * negatives_below + neg_here);
        negatives_below += neg_here;
        i = j;
    }
    Ok((u2, positives, negatives))
}

/// `P(score_pos > score_neg) + P(tie) / 2`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let (u2, p, n) = mann_whitney_u2(scores, labels)?;
    Ok(u2 as f64 / (2.0 * p as f64 * n as f64))
}

/// Mean one-vs-rest AUC over classes that have both positives and negatives.
/// `probs[i][c]` is the score of sample `i` for class `c`.
pub fn macro_auc(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Option<f64> {
    let aucs: Vec<f64> = (0..num_classes)
        .filter_map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let is_c: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            roc_auc(&scores, &is_c).ok()
        })
        .collect();
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Rows are true classes, columns predicted classes.
    pub confusion_matrix: Vec<Vec<usize>>,
    /// `None` for classes absent from the evaluation set.
    pub per_class_acc: Vec<Option<f64>>,
    /// Unweighted mean of the defined per-class accuracies.
    pub mean_acc: f64,
    pub overall_acc: f64,
    pub macro_auc: Option<f64>,
}

impl EvalReport {
    /// Builds the report from per-sample class scores (argmax prediction,
    /// first index on ties).
    pub fn from_scores(
        probs: &[Vec<f64>],
        labels: &[usize],
        class_names: &[String],
    ) -> Result<Self, MetricError> {
        if probs.is_empty() {
            return Err(MetricError::Empty);
        }
        if probs.len() != labels.len() {
            return Err(MetricError::LengthMismatch {
                scores: probs.len(),
                labels: labels.len(),
            });
        }
        let k = class_names.len();
        let mut confusion = vec![vec![0usize; k]; k];
        for (p, &l) in probs.iter().zip(labels) {
            let mut pred = 0;
            for c in 1..k {
                if p[c] > p[pred] {
                    pred = c;
                }
            }
            confusion[l][pred] += 1;
        }
        let per_class_acc: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[c] as f64 / total as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class_acc.iter().flatten().copied().collect();
        let mean_acc = defined.iter().sum::<f64>() / defined.len() as f64;
        let trace: usize = (0..k).map(|c| confusion[c][c]).sum();
        Ok(EvalReport {
            class_names: class_names.to_vec(),
            overall_acc: trace as f64 / labels.len() as f64,
            confusion_matrix: confusion,
            per_class_acc,
            mean_acc,
            macro_auc: macro_auc(probs, labels, k),
        })
    }
}

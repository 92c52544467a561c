use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Multiclass; logits have one column per class.
    SoftmaxCrossEntropy,
    /// Binary; a single logit column and labels in {0, 1}.
    SigmoidBce,
}

impl LossKind {
    pub fn output_dim(self, n_classes: usize) -> usize {
        match self {
            LossKind::SoftmaxCrossEntropy => n_classes,
            LossKind::SigmoidBce => 1,
        }
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_labels(logits: &DenseMatrix, labels: &[usize], kind: LossKind) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::Input(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    let classes = match kind {
        LossKind::SoftmaxCrossEntropy => logits.cols(),
        LossKind::SigmoidBce => {
            if logits.cols() != 1 {
                return Err(Error::Input(format!(
                    "sigmoid BCE expects one logit column, got {}",
                    logits.cols()
                )));
            }
            2
        }
    };
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Input(format!(
            "label {y} at row {i} outside class range 0..{classes}"
        )));
    }
    Ok(())
}

fn row_loss(z: &[f64], y: usize, kind: LossKind) -> f64 {
    match kind {
        LossKind::SigmoidBce => softplus(z[0]) - y as f64 * z[0],
        LossKind::SoftmaxCrossEntropy => {
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - z[y]
        }
    }
}

/// Batch-mean loss without the gradient.
pub fn loss(logits: &DenseMatrix, labels: &[usize], kind: LossKind) -> Result<f64> {
    check_labels(logits, labels, kind)?;
    let n = logits.rows().max(1) as f64;
    let total: f64 = (0..logits.rows())
        .map(|r| row_loss(logits.row(r), labels[r], kind))
        .sum();
    Ok(total / n)
}

/// Batch-mean loss and its exact gradient with respect to the logits.
pub fn loss_and_grad(
    logits: &DenseMatrix,
    labels: &[usize],
    kind: LossKind,
) -> Result<(f64, DenseMatrix)> {
    check_labels(logits, labels, kind)?;
    let rows = logits.rows();
    let cols = logits.cols();
    let n = rows.max(1) as f64;
    let mut d = DenseMatrix::zeros(rows, cols);
    let mut total = 0.0;
    for r in 0..rows {
        let z = logits.row(r);
        let y = labels[r];
        total += row_loss(z, y, kind);
        let dr = &mut d.values_mut()[r * cols..(r + 1) * cols];
        match kind {
            LossKind::SigmoidBce => dr[0] = (sigmoid(z[0]) - y as f64) / n,
            LossKind::SoftmaxCrossEntropy => {
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
                for (j, slot) in dr.iter_mut().enumerate() {
                    let p = (z[j] - max).exp() / sum;
                    *slot = (p - if j == y { 1.0 } else { 0.0 }) / n;
                }
            }
        }
    }
    Ok((total / n, d))
}

/// Positive-class score used for AUC: the logit for BCE, `z₁ − z₀` for two-class softmax.
pub fn positive_scores(logits: &DenseMatrix, kind: LossKind) -> Result<Vec<f64>> {
    match (kind, logits.cols()) {
        (LossKind::SigmoidBce, 1) => Ok(logits.values().to_vec()),
        (LossKind::SoftmaxCrossEntropy, 2) => {
            Ok((0..logits.rows()).map(|r| logits.get(r, 1) - logits.get(r, 0)).collect())
        }
        (_, c) => Err(Error::Input(format!(
            "positive-class scores need a binary output, got {c} columns"
        ))),
    }
}

/// Predicted class per row.
pub fn predict_classes(logits: &DenseMatrix, kind: LossKind) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let z = logits.row(r);
            match kind {
                LossKind::SigmoidBce => usize::from(z[0] >= 0.0),
                LossKind::SoftmaxCrossEntropy => z
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                        if v > best.1 {
                            (j, v)
                        } else {
                            best
                        }
                    })
                    .0,
            }
        })
        .collect()
}

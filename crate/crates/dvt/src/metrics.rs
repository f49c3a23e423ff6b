//! Evaluation: confusion matrices, precision/recall/F1, unweighted mean F1,
//! accuracy, and per-point prediction entropy in bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Per class; 0 where undefined (no predictions / no true samples).
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// Mean of per-class F1 over classes that appear in y_true.
    pub mean_f1: f64,
    /// confusion[t][p] counts rows with true class t predicted as p.
    pub confusion: Vec<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy: Option<Vec<f64>>,
}

fn check_labels(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<()> {
    if y_true.is_empty() {
        return Err(Error::Invalid("metrics: empty label vectors".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape {
            op: "metrics",
            detail: format!("{} true labels vs {} predictions", y_true.len(), y_pred.len()),
        });
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&l| l >= k) {
        return Err(Error::Invalid(format!("metrics: label {} out of range 0..{}", bad, k)));
    }
    Ok(())
}

/// K×K counts, rows indexed by true class, columns by prediction.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    check_labels(y_true, y_pred, k)?;
    let mut m = vec![vec![0usize; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::Invalid("metrics: empty label vectors".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape {
            op: "accuracy",
            detail: format!("{} true labels vs {} predictions", y_true.len(), y_pred.len()),
        });
    }
    let hits = y_true.iter().zip(y_pred).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / y_true.len() as f64)
}

/// Per-class precision, recall, F1 from a confusion matrix. Undefined ratios
/// (empty denominators) are 0; F1 is 0 whenever precision + recall is 0.
pub fn per_class_prf(confusion: &[Vec<usize>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = confusion.len();
    let mut precision = vec![0.0; k];
    let mut recall = vec![0.0; k];
    let mut f1 = vec![0.0; k];
    for c in 0..k {
        let tp = confusion[c][c];
        let pred_c: usize = (0..k).map(|t| confusion[t][c]).sum();
        let true_c: usize = confusion[c].iter().sum();
        let p = if pred_c == 0 { 0.0 } else { tp as f64 / pred_c as f64 };
        let r = if true_c == 0 { 0.0 } else { tp as f64 / true_c as f64 };
        precision[c] = p;
        recall[c] = r;
        f1[c] = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    (precision, recall, f1)
}

/// Arithmetic mean of per-class F1, weighting every class equally. Classes
/// that never occur in y_true are excluded from the mean (they carry no
/// evidence); classes present but never correctly predicted contribute 0.
pub fn unweighted_mean_f1(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<f64> {
    let confusion = confusion_matrix(y_true, y_pred, k)?;
    let (_, _, f1) = per_class_prf(&confusion);
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..k {
        if confusion[c].iter().sum::<usize>() > 0 {
            sum += f1[c];
            count += 1;
        }
    }
    debug_assert!(count > 0, "nonempty y_true has at least one class");
    Ok(sum / count as f64)
}

/// Shannon entropy in bits per row, with 0·log 0 = 0. Rows must sum to
/// 1 ± 1e−6 and be nonnegative.
pub fn prediction_entropy(probabilities: &Tensor) -> Result<Vec<f64>> {
    if probabilities.rank() != 2 {
        return Err(Error::Shape {
            op: "prediction_entropy",
            detail: format!("expected [N, K], got {:?}", probabilities.shape()),
        });
    }
    let mut out = Vec::with_capacity(probabilities.rows());
    for i in 0..probabilities.rows() {
        let row = probabilities.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Invalid(format!(
                "prediction_entropy: row {} is not a probability vector (sum {})",
                i, sum
            )));
        }
        let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
        out.push(h);
    }
    Ok(out)
}

/// Row-wise argmax with ties resolved to the lowest index.
pub fn argmax_rows(probabilities: &Tensor) -> Vec<usize> {
    (0..probabilities.rows())
        .map(|i| {
            let row = probabilities.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Full report; `entropy` attaches per-point entropies when available.
pub fn evaluate(
    y_true: &[usize],
    y_pred: &[usize],
    k: usize,
    entropy: Option<Vec<f64>>,
) -> Result<EvalReport> {
    let confusion = confusion_matrix(y_true, y_pred, k)?;
    let (precision, recall, f1) = per_class_prf(&confusion);
    Ok(EvalReport {
        accuracy: accuracy(y_true, y_pred)?,
        mean_f1: unweighted_mean_f1(y_true, y_pred, k)?,
        precision,
        recall,
        f1,
        confusion,
        entropy,
    })
}

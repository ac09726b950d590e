//! Pixel-level segmentation metrics over class-index masks.

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u8,
    /// Appears in the truth or the prediction.
    pub present: bool,
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    /// One-vs-rest pixel accuracy.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    /// Fraction of pixels whose class matches.
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Means over present classes only.
    pub macro_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Confusion matrix `m[truth][pred]` from flat class arrays.
pub fn confusion_matrix(pred: &[u8], truth: &[u8], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::Input(format!(
            "prediction has {} pixels, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        for (v, what) in [(p, "prediction"), (t, "truth")] {
            if v as usize >= n_classes {
                return Err(Error::Input(format!("{what} class {v} outside 0..{n_classes}")));
            }
        }
        m[t as usize][p as usize] += 1;
    }
    Ok(m)
}

pub fn compute_metrics(pred: &GrayImage, truth: &GrayImage, n_classes: usize) -> Result<SegMetrics> {
    if pred.dimensions() != truth.dimensions() {
        return Err(Error::Input(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dimensions(),
            truth.dimensions()
        )));
    }
    metrics_from_slices(pred.as_raw(), truth.as_raw(), n_classes)
}

pub fn metrics_from_slices(pred: &[u8], truth: &[u8], n_classes: usize) -> Result<SegMetrics> {
    if n_classes == 0 || n_classes > 256 {
        return Err(Error::Usage(format!("class count {n_classes} outside 1..=256")));
    }
    let m = confusion_matrix(pred, truth, n_classes)?;
    let total = pred.len() as u64;
    let correct: u64 = (0..n_classes).map(|c| m[c][c]).sum();
    let per_class: Vec<ClassMetrics> = (0..n_classes)
        .map(|c| {
            let tp = m[c][c];
            let truth_c: u64 = m[c].iter().sum();
            let pred_c: u64 = m.iter().map(|row| row[c]).sum();
            let (fp, fn_) = (pred_c - tp, truth_c - tp);
            let precision = ratio(tp, pred_c);
            let recall = ratio(tp, truth_c);
            ClassMetrics {
                class: c as u8,
                present: truth_c + pred_c > 0,
                true_positive: tp,
                false_positive: fp,
                false_negative: fn_,
                accuracy: ratio(total - fp - fn_, total),
                precision,
                recall,
                f1: f1_score(precision, recall),
            }
        })
        .collect();
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.present).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
        }
    };
    Ok(SegMetrics {
        accuracy: ratio(correct, total),
        macro_accuracy: mean(|c| c.accuracy),
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        per_class,
    })
}

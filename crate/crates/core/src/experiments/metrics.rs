//! Classification metrics.

use crate::error::{Error, Result};

fn check(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Metric("no predictions".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1 over the classes that occur in `labels`.
/// A present class that is never predicted correctly scores 0; classes absent
/// from `labels` are skipped.
pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    check(preds, labels)?;
    if let Some(&c) = preds.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(Error::Metric(format!("class {c} out of range for {classes} classes")));
    }
    let mut tp = vec![0usize; classes];
    let mut pred_count = vec![0usize; classes];
    let mut true_count = vec![0usize; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        pred_count[p] += 1;
        true_count[y] += 1;
        if p == y {
            tp[p] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..classes {
        if true_count[c] == 0 {
            continue;
        }
        present += 1;
        if tp[c] > 0 {
            let precision = tp[c] as f64 / pred_count[c] as f64;
            let recall = tp[c] as f64 / true_count[c] as f64;
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(sum / present as f64)
}

/// `2 F D / (F + D)`, zero when both are zero.
pub fn harmonic_mean(f: f64, d: f64) -> f64 {
    if f + d == 0.0 {
        0.0
    } else {
        2.0 * f * d / (f + d)
    }
}

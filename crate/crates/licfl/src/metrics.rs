//! Evaluation metrics: MSE, F1 on the positive class, adjusted Rand index.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Per-client evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub f1: f64,
    /// Number of evaluated samples.
    pub support: usize,
    /// Classification threshold applied to raw predictions.
    pub threshold: f64,
}

/// Mean squared error between predictions and labels.
pub fn mse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::contract(format!(
            "mse requires equal non-zero lengths, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let sum: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// F1 score of the positive class after thresholding predictions.
/// Defined as 0 when precision + recall is 0.
pub fn f1(predictions: &[f64], labels: &[f64], threshold: f64) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::contract("f1 requires equal lengths"));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, y) in predictions.iter().zip(labels) {
        let predicted = *p >= threshold;
        let actual = *y >= 0.5;
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// MSE and F1 in one report.
pub fn eval_report(predictions: &[f64], labels: &[f64], threshold: f64) -> Result<EvalReport> {
    Ok(EvalReport {
        mse: mse(predictions, labels)?,
        f1: f1(predictions, labels, threshold)?,
        support: labels.len(),
        threshold,
    })
}

/// Adjusted Rand index between two labelings of the same items.
///
/// Chance-corrected: 1.0 iff the partitions are identical up to relabeling,
/// around 0 for independent partitions, and possibly negative.
pub fn adjusted_rand_index(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    let n = labels_a.len();
    if n != labels_b.len() || n < 2 {
        return Err(Error::contract(
            "adjusted_rand_index requires equal lengths >= 2",
        ));
    }
    let ka = labels_a.iter().max().unwrap() + 1;
    let kb = labels_b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        table[a][b] += 1;
    }

    fn choose2(x: u64) -> f64 {
        (x as f64) * (x as f64 - 1.0) / 2.0
    }

    let sum_cells: f64 = table
        .iter()
        .flat_map(|row| row.iter())
        .map(|&c| choose2(c))
        .sum();
    let sum_a: f64 = table
        .iter()
        .map(|row| choose2(row.iter().sum::<u64>()))
        .sum();
    let sum_b: f64 = (0..kb)
        .map(|j| choose2(table.iter().map(|row| row[j]).sum::<u64>()))
        .sum();
    let total = choose2(n as u64);

    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-12 {
        // Degenerate partitions (all singletons or one cluster on both
        // sides): agreement is exact by construction.
        return Ok(1.0);
    }
    Ok((sum_cells - expected) / (max_index - expected))
}

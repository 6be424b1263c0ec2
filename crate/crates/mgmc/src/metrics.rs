//! Evaluation metrics: classification accuracy, macro-averaged one-vs-rest
//! ROC-AUC with midrank tie handling, and RMSE over a held-out entry set.

use crate::error::{MgmcError, Result};
use crate::matrix::Matrix;

/// Predicted class per row: the argmax over columns, ties to the lowest
/// column index.
pub fn argmax_classes(scores: &Matrix) -> Vec<usize> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Fraction of positions where the predictions match the truth.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(MgmcError::Contract(format!(
            "need equal non-empty class vectors, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Midranks (1-based) of `values`: tied values share the mean of the ranks
/// they would occupy.
fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) get the average 1-based rank.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// AUC of `scores` against binary membership via the Mann–Whitney rank
/// statistic with midrank ties.
fn binary_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let ranks = midranks(scores);
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    debug_assert!(n_pos > 0 && n_neg > 0);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(&r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos as f64 * n_neg as f64)
}

/// Macro one-vs-rest ROC-AUC: for each class present in the truth, the AUC
/// of that class's score column against membership, averaged uniformly.
/// Classes with a score column but no truth rows are skipped with a warning.
pub fn roc_auc(scores: &Matrix, truth: &[usize]) -> Result<f64> {
    if truth.len() != scores.rows() || truth.is_empty() {
        return Err(MgmcError::Contract(format!(
            "scores have {} rows but truth has {} entries",
            scores.rows(),
            truth.len()
        )));
    }
    let c = scores.cols();
    if let Some(&bad) = truth.iter().find(|&&t| t >= c) {
        return Err(MgmcError::Contract(format!("class {bad} out of range for {c} score columns")));
    }
    let mut present = vec![false; c];
    for &t in truth {
        present[t] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(MgmcError::Contract("need at least 2 classes present in the truth".into()));
    }

    let mut sum = 0.0;
    let mut used = 0usize;
    for k in 0..c {
        if !present[k] {
            log::warn!("class {k} absent from truth; skipping it in the macro AUC");
            continue;
        }
        let col: Vec<f64> = (0..scores.rows()).map(|r| scores.get(r, k)).collect();
        let membership: Vec<bool> = truth.iter().map(|&t| t == k).collect();
        sum += binary_auc(&col, &membership);
        used += 1;
    }
    Ok(sum / used as f64)
}

/// Root-mean-square error over the listed entries; `None` when the list is
/// empty (the metric is absent, not zero).
pub fn masked_rmse(
    predicted: &Matrix,
    truth: &Matrix,
    entries: &[(usize, usize)],
) -> Result<Option<f64>> {
    if !predicted.same_shape(truth) {
        return Err(MgmcError::Dimension(format!(
            "prediction is {:?} but truth is {:?}",
            predicted.shape(),
            truth.shape()
        )));
    }
    if entries.is_empty() {
        return Ok(None);
    }
    let mut ss = 0.0;
    for &(r, c) in entries {
        if r >= truth.rows() || c >= truth.cols() {
            return Err(MgmcError::Contract(format!(
                "entry ({r}, {c}) outside a {:?} matrix",
                truth.shape()
            )));
        }
        let d = predicted.get(r, c) - truth.get(r, c);
        ss += d * d;
    }
    Ok(Some((ss / entries.len() as f64).sqrt()))
}
